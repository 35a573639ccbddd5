//! Gradient comparisons, trend statistics, cross-validation and
//! detection/mask metrics.

mod cv;
mod gradients;
mod metrics;
mod prop1;

pub use cv::{cross_validate, fold_partition, CurvePoint, CvOptions, CvReport, FoldScore};
pub use gradients::{cosine, gradient_compare, mse, spearman, GradientReport, GroupDiff};
pub use metrics::{confusion_metrics, pa_iu, ConfusionMetrics, MaskScores};
pub use prop1::{prop1_experiment, prop1_experiment_on, Prop1Config, Prop1Row, Prop1Table, Trend};
