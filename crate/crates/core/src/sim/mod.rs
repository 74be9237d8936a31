//! Deterministic top-down driving simulator with scripted routes, sensor
//! rendering, a privileged expert and the closed-loop benchmark harness.

pub mod dataset;
pub mod expert;
pub mod geometry;
pub mod harness;
pub mod route;
pub mod sensors;
pub mod world;

pub use dataset::{collect_dataset, collect_frames, training_routes, CollectConfig, Dataset, ExpertRecord};
pub use expert::{Expert, ExpertConfig};
pub use harness::{evaluate_benchmark, run_route, BenchmarkReport, HarnessConfig, Observation, Policy, RouteResult};
pub use route::{route_set, Route, TICK};
pub use sensors::{render, SensorBundle, SensorConfig};
pub use world::{Scene, VehicleParams};
