//! The quadratic sandbox: scenarios, reference experiments and reports.
//!
//! Every run is a pure function of its [`Scenario`] (which carries the seed).

mod calibrate;
mod experiments;
mod report;
mod scenario;
mod stream;

pub use calibrate::{calibrate_constant, grid_point, round_up_to_grid, CalibrationReport, GridGradient, GridScenario};
pub use experiments::{
    run_blocks, run_exposure, run_gap_sweep, run_operator_validation, run_variance_comparison, AlignedRow, BlocksReport,
    ExposureReport, GapReport, OperatorArm, OperatorReport, SweepPoint, VarianceReport, VarianceRow,
};
pub use report::{canonical_json, write_csv, write_outputs, CsvTable, Metadata, Report, CODE_VERSION, REPORT_SCHEMA_VERSION};
pub use scenario::{
    CalibrationSpec, GradientSpec, MethodKind, PartitionSpec, Regime, Scenario, SpectrumSpec, StreamSpec, SCHEMA_VERSION,
};
pub use stream::{
    build_tasks, run_continual_stream, run_method, Comparison, MethodRun, MethodSummary, StreamReport, StreamSettings,
    StreamTask, Verdict,
};
