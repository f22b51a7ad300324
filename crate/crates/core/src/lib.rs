//! Two-stage multi-person video forecasting: a hierarchical pose forecaster
//! whose recurrent states interact through dynamically re-estimated groups,
//! followed by an appearance renderer that paints forecast posemaps in the
//! style of a reference frame via an adaptively generated filter bank.

pub mod ad;
pub mod ada_render;
pub mod checkpoint;
pub mod cli;
pub mod forecaster;
pub mod group_dynamics;
pub mod metrics;
pub mod nn;
pub mod pose_data;
pub mod pose_training;
