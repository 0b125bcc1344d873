//! Return-conditioned sequence policies that drop the return condition where
//! the environment, not the agent, decides the outcome. The toy driving
//! environment and the DT and BC baselines live here too.

pub mod config;
pub mod env;
pub mod evaluator;
pub mod features;
pub mod grad;
pub mod manifest;
pub mod pipeline;
pub mod planner;
pub mod policy;
pub mod return_model;
pub mod segmenter;
pub mod trajlog;
