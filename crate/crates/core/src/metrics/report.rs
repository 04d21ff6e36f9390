use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::iou::{iou3d, iou_for_symmetric};
use super::pixel::{DepthMetrics, NormalMetrics, ANGLE_TIE_DEG};
use crate::error::{Error, Result};
use crate::geometry::{symmetric_rotation_error_degrees, Pose};
use crate::synth::Category;

/// Rotation error (symmetry-aware) and translation error in centimeters.
pub fn pose_errors(est: &Pose, gt: &Pose, symmetric: bool) -> (f64, f64) {
    let rot = symmetric_rotation_error_degrees(&est.r, &gt.r, symmetric);
    let cm = (est.t - gt.t).norm() * 100.0;
    (rot, cm)
}

/// Both errors strictly below their thresholds.
pub fn degree_cm_hit(est: &Pose, gt: &Pose, deg: f64, cm: f64, symmetric: bool) -> bool {
    let (rot, dist) = pose_errors(est, gt, symmetric);
    rot < deg - ANGLE_TIE_DEG && dist < cm - 1e-9
}

/// IoU used by the report: symmetric objects are aligned first.
pub fn report_iou(est: &Pose, gt: &Pose, symmetric: bool) -> f64 {
    if symmetric {
        iou_for_symmetric(est, gt)
    } else {
        iou3d(est, gt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub category: Category,
    pub pose: Pose,
}

pub const IOU_THRESHOLDS: [f64; 3] = [0.25, 0.50, 0.75];
pub const DEG_CM: [(f64, f64); 3] = [(5.0, 5.0), (10.0, 5.0), (10.0, 10.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub count: usize,
    pub iou_25: f64,
    pub iou_50: f64,
    pub iou_75: f64,
    pub deg5_cm5: f64,
    pub deg10_cm5: f64,
    pub deg10_cm10: f64,
    pub rot_err_deg: f64,
    pub trans_err_cm: f64,
    pub depth: Option<DepthMetrics>,
    pub normal: Option<NormalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Symmetric objects have their estimated box spun about z to the
    /// ground-truth x-axis before IoU.
    pub symmetric_iou_alignment: bool,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub config_hash_mismatch: bool,
    pub rows: Vec<ReportRow>,
}

pub const CSV_COLUMNS: [&str; 22] = [
    "category",
    "count",
    "3D_25",
    "3D_50",
    "3D_75",
    "5deg5cm",
    "10deg5cm",
    "10deg10cm",
    "rot_err_deg",
    "trans_err_cm",
    "depth_rmse",
    "depth_rel",
    "depth_mae",
    "delta_1.05",
    "delta_1.10",
    "delta_1.25",
    "normal_rmse",
    "normal_mae",
    "normal_mean_deg",
    "normal_11.25",
    "normal_22.5",
    "normal_30",
];

#[derive(Default)]
struct Tally {
    n: usize,
    iou: [usize; 3],
    dc: [usize; 3],
    rot: f64,
    trans: f64,
}

impl Tally {
    fn row(&self, name: &str) -> ReportRow {
        let n = self.n.max(1) as f64;
        let f = |k: usize| k as f64 / n;
        ReportRow {
            category: name.to_string(),
            count: self.n,
            iou_25: f(self.iou[0]),
            iou_50: f(self.iou[1]),
            iou_75: f(self.iou[2]),
            deg5_cm5: f(self.dc[0]),
            deg10_cm5: f(self.dc[1]),
            deg10_cm10: f(self.dc[2]),
            rot_err_deg: self.rot / n,
            trans_err_cm: self.trans / n,
            depth: None,
            normal: None,
        }
    }
}

/// Pairs predictions with ground truth by id and aggregates pose metrics per
/// category (in category order) and overall. Pairs are processed in id order
/// so the result does not depend on input order.
pub fn evaluate(predictions: &[PoseRecord], ground_truth: &[PoseRecord]) -> Result<MetricReport> {
    let preds: BTreeMap<&str, &PoseRecord> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let gts: BTreeMap<&str, &PoseRecord> = ground_truth.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .map(|k| k.to_string())
        .collect();
    if preds.len() != predictions.len() || gts.len() != ground_truth.len() {
        unmatched.push("<duplicate id>".into());
    }
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::Pairing(unmatched));
    }
    let mut per_cat: BTreeMap<Category, Tally> = BTreeMap::new();
    let mut all = Tally::default();
    for (id, gt) in &gts {
        let est = preds[id];
        if est.category != gt.category {
            return Err(Error::Pairing(vec![format!("{id}: category {} vs {}", est.category, gt.category)]));
        }
        let sym = gt.category.symmetric();
        let iou = report_iou(&est.pose, &gt.pose, sym);
        let (rot, cm) = pose_errors(&est.pose, &gt.pose, sym);
        for tally in [per_cat.entry(gt.category).or_default(), &mut all] {
            tally.n += 1;
            for (k, thr) in IOU_THRESHOLDS.iter().enumerate() {
                tally.iou[k] += (iou > *thr) as usize;
            }
            for (k, (deg, lim)) in DEG_CM.iter().enumerate() {
                tally.dc[k] += (rot < deg - ANGLE_TIE_DEG && cm < lim - 1e-9) as usize;
            }
            tally.rot += rot;
            tally.trans += cm;
        }
    }
    let mut rows: Vec<ReportRow> = per_cat.iter().map(|(c, t)| t.row(c.name())).collect();
    rows.push(all.row("all"));
    Ok(MetricReport {
        symmetric_iou_alignment: true,
        config_hash: String::new(),
        seed: 0,
        dataset_hash: String::new(),
        config_hash_mismatch: false,
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricReport {
    pub fn row(&self, category: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    /// Checks the ordering invariants every report must satisfy.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for r in &self.rows {
            let fr = [r.iou_25, r.iou_50, r.iou_75, r.deg5_cm5, r.deg10_cm5, r.deg10_cm10];
            if !fr.iter().all(|v| unit(*v)) {
                return Err(format!("{}: fraction outside [0,1]", r.category));
            }
            if !(r.iou_25 >= r.iou_50 && r.iou_50 >= r.iou_75) {
                return Err(format!("{}: IoU thresholds not monotone", r.category));
            }
            if !(r.deg10_cm5 >= r.deg5_cm5 && r.deg10_cm10 >= r.deg10_cm5) {
                return Err(format!("{}: degree-cm thresholds not monotone", r.category));
            }
            if let Some(d) = r.depth {
                if !(unit(d.delta_105) && d.delta_105 <= d.delta_110 && d.delta_110 <= d.delta_125 && unit(d.delta_125)) {
                    return Err(format!("{}: delta thresholds not monotone", r.category));
                }
            }
            if let Some(n) = r.normal {
                if !(unit(n.within_11_25) && n.within_11_25 <= n.within_22_5 && n.within_22_5 <= n.within_30 && unit(n.within_30)) {
                    return Err(format!("{}: normal thresholds not monotone", r.category));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_hash={}", self.config_hash);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# dataset_hash={}", self.dataset_hash);
        let _ = writeln!(out, "# symmetric_iou_alignment={}", self.symmetric_iou_alignment);
        if self.config_hash_mismatch {
            let _ = writeln!(out, "# warning=config hash differs from checkpoint");
        }
        out.push_str(&CSV_COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let d = r.depth;
            let n = r.normal;
            let fields = [
                r.category.clone(),
                r.count.to_string(),
                format!("{:.6}", r.iou_25),
                format!("{:.6}", r.iou_50),
                format!("{:.6}", r.iou_75),
                format!("{:.6}", r.deg5_cm5),
                format!("{:.6}", r.deg10_cm5),
                format!("{:.6}", r.deg10_cm10),
                format!("{:.6}", r.rot_err_deg),
                format!("{:.6}", r.trans_err_cm),
                opt(d.map(|d| d.rmse)),
                opt(d.map(|d| d.rel)),
                opt(d.map(|d| d.mae)),
                opt(d.map(|d| d.delta_105)),
                opt(d.map(|d| d.delta_110)),
                opt(d.map(|d| d.delta_125)),
                opt(n.map(|n| n.rmse)),
                opt(n.map(|n| n.mae)),
                opt(n.map(|n| n.mean_deg)),
                opt(n.map(|n| n.within_11_25)),
                opt(n.map(|n| n.within_22_5)),
                opt(n.map(|n| n.within_30)),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use nalgebra::{Matrix3, Vector3};

    fn gt_pose() -> Pose {
        Pose::new(axis_angle(&Vector3::new(0.1, 0.4, 1.0), 0.5), Vector3::new(0.02, -0.01, 0.5), Vector3::new(0.08, 0.08, 0.12))
            .unwrap()
    }

    #[test]
    fn exact_pose_hits_everything() {
        let g = gt_pose();
        for (d, c) in DEG_CM {
            assert!(degree_cm_hit(&g, &g, d, c, false));
            assert!(degree_cm_hit(&g, &g, d, c, true));
        }
    }

    #[test]
    fn translation_only_error() {
        let g = gt_pose();
        let e = Pose { t: g.t + Vector3::new(0.04, 0.0, 0.0), ..g };
        assert!(degree_cm_hit(&e, &g, 5.0, 5.0, false));
        assert!(!degree_cm_hit(&e, &g, 5.0, 4.0, false));
    }

    #[test]
    fn seven_degree_tilt_on_symmetric_object() {
        let g = gt_pose();
        let axis = g.r.column(2).cross(&Vector3::x());
        let e = Pose {
            r: axis_angle(&axis, 7f64.to_radians()) * g.r,
            t: g.t + Vector3::new(0.0, 0.01, 0.0),
            ..g
        };
        assert!(!degree_cm_hit(&e, &g, 5.0, 5.0, true));
        assert!(degree_cm_hit(&e, &g, 10.0, 5.0, true));
    }

    fn records(n: usize) -> Vec<PoseRecord> {
        (0..n)
            .map(|i| PoseRecord {
                id: format!("s{i:03}"),
                category: Category::ALL[i % 4],
                pose: Pose { t: Vector3::new(0.0, 0.0, 0.4 + 0.01 * i as f64), ..gt_pose() },
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_saturate() {
        let gt = records(12);
        let rep = evaluate(&gt, &gt).unwrap();
        for r in &rep.rows {
            assert_eq!([r.iou_25, r.iou_50, r.iou_75], [1.0; 3]);
            assert_eq!([r.deg5_cm5, r.deg10_cm5, r.deg10_cm10], [1.0; 3]);
        }
        assert_eq!(rep.rows.len(), 5);
        assert_eq!(rep.row("all").unwrap().count, 12);
    }

    #[test]
    fn unmatched_ids_are_listed() {
        let gt = records(3);
        let mut pred = gt.clone();
        pred[1].id = "zzz".into();
        match evaluate(&pred, &gt) {
            Err(Error::Pairing(ids)) => assert_eq!(ids, vec!["s001".to_string(), "zzz".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shuffled_inputs_give_identical_report() {
        let gt = records(9);
        let mut pred = gt.clone();
        for p in pred.iter_mut() {
            p.pose.r = axis_angle(&Vector3::z(), 0.05) * p.pose.r;
        }
        let a = evaluate(&pred, &gt).unwrap();
        let mut pr = pred.clone();
        pr.reverse();
        let mut gr = gt.clone();
        gr.rotate_left(4);
        let b = evaluate(&pr, &gr).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn csv_header_matches_schema() {
        let gt = records(4);
        let csv = evaluate(&gt, &gt).unwrap().to_csv();
        let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(
            header,
            "category,count,3D_25,3D_50,3D_75,5deg5cm,10deg5cm,10deg10cm,rot_err_deg,trans_err_cm,\
             depth_rmse,depth_rel,depth_mae,delta_1.05,delta_1.10,delta_1.25,normal_rmse,normal_mae,\
             normal_mean_deg,normal_11.25,normal_22.5,normal_30"
        );
        let _ = Matrix3::<f64>::identity();
    }
}
