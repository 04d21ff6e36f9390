//! Pose, box-overlap and dense-prediction metrics.

mod iou;
mod pixel;
mod report;

pub use iou::{intersection_volume, iou3d, iou3d_mc_oracle, iou_for_symmetric};
pub use pixel::{
    angle_between_deg, depth_metrics, normal_metrics, DepthAccumulator, DepthMetrics, NormalAccumulator,
    NormalMetrics, ANGLE_TIE_DEG,
};
pub use report::{
    degree_cm_hit, evaluate, pose_errors, report_iou, MetricReport, PoseRecord, ReportRow, CSV_COLUMNS, DEG_CM,
    IOU_THRESHOLDS,
};
