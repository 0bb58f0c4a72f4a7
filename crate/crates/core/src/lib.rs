//! Kaleidoscopic background attacks on pointmap-based relative pose
//! estimation.
//!
//! The crate builds N-fold symmetric discs from a single segment image,
//! renders them on a ground plane from arbitrary viewpoints, scores a pair of
//! pointmaps with the projected orientation consistency loss `L_poc`, measures
//! pose accuracy, and optimizes the segment against a victim estimator.

pub mod attack;
pub mod bridge;
pub mod error;
pub mod grid;
pub mod homography;
pub mod io;
pub mod kaleido;
pub mod metrics;
pub mod poc;
pub mod pose;
pub mod rectify;
pub mod scene;
pub mod texture;
pub mod victim;

pub use attack::{run_attack, AttackConfig, AttackRecord, AttackTrace, GradientEstimate, VictimKind};
pub use bridge::BridgeVictim;
pub use error::{Error, Result};
pub use grid::{Grid, Mask, RgbImage};
pub use kaleido::{compose_disc, DiscImage, DiscSpec, SegmentImage};
pub use metrics::{compute_report, MetricsReport, PoseSet};
pub use poc::{poc_loss, LossValue, PocView};
pub use pose::{look_at_pose, CameraPose, Intrinsics, RotationMatrix};
pub use scene::{render_view, Pointmap, RenderedView, SceneConfig, Viewpoint, ViewpointRanges};
pub use victim::{BuiltinVictim, MatcherConfig, Victim, VictimInput, VictimOutput};
