//! Pipe segmentation and time-step selection.
//!
//! The Lax–Wendroff update is stable when every pipe's Courant number
//! `β = |v| Δt / Δx` stays in `(0, 1]`. Given a hydraulic profile this
//! module picks segment counts and a water-quality step `Δt` so that holds,
//! and so that the metric window is an integer number `k_f` of steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::HydraulicProfile;
use crate::network::NetworkModel;

const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPolicy {
    /// Same segment count for every pipe. `dt` is an explicit request; when
    /// absent the largest stable step dividing the window is chosen.
    Fixed { segments: usize, dt: Option<f64> },
    /// Per-step segment counts `ceil(L / (|v| Δt_target))`.
    Dynamic { dt_target: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizationError {
    #[error("requested dt {requested} s exceeds the stability limit {limit} s")]
    UnstableRequest { requested: f64, limit: f64 },
    #[error("step {step}: non-finite velocity in pipe {pipe}")]
    NonfiniteVelocity { step: usize, pipe: String },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// Discretization of one hydraulic step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiscretization {
    /// Segment count per pipe, canonical pipe order.
    pub segments: Vec<usize>,
    /// Cell width per pipe, m.
    pub dx: Vec<f64>,
    /// Courant number `|v| Δt / Δx` per pipe (0 for stagnant pipes).
    pub courant: Vec<f64>,
    /// Water-quality time step, s.
    pub dt: f64,
    /// Steps in the metric window (`k_f`).
    pub window_steps: usize,
    /// Steps covering one hydraulic interval during simulation.
    pub interval_steps: usize,
}

impl StepDiscretization {
    pub fn total_segments(&self) -> usize {
        self.segments.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub policy: SegmentPolicy,
    pub window_s: f64,
    pub steps: Vec<StepDiscretization>,
}

/// Largest stable `Δt` for the given segment counts and velocities.
pub(crate) fn stability_limit(model: &NetworkModel, segments: &[usize], velocity: &[f64]) -> f64 {
    model
        .pipes
        .iter()
        .zip(segments)
        .zip(velocity)
        .filter(|(_, v)| **v != 0.0)
        .map(|((p, s), v)| p.length / *s as f64 / v.abs())
        .fold(f64::INFINITY, f64::min)
}

fn steps_for(duration: f64, dt: f64) -> usize {
    ((duration / dt) - ROUNDING_SLACK).ceil().max(1.0) as usize
}

fn finish(model: &NetworkModel, segments: Vec<usize>, velocity: &[f64], dt: f64, window_steps: usize, dt_hydraulic: f64) -> StepDiscretization {
    let dx: Vec<f64> = model
        .pipes
        .iter()
        .zip(&segments)
        .map(|(p, s)| p.length / *s as f64)
        .collect();
    let courant = velocity.iter().zip(&dx).map(|(v, dx)| v.abs() * dt / dx).collect();
    StepDiscretization {
        segments,
        dx,
        courant,
        dt,
        window_steps,
        interval_steps: steps_for(dt_hydraulic, dt),
    }
}

/// Plans segment counts and time steps for every hydraulic step.
///
/// `window_s` is the metric horizon `k_f Δt`; it defaults to the hydraulic
/// step duration when `None`.
pub fn plan_discretization(
    model: &NetworkModel,
    profile: &HydraulicProfile,
    policy: SegmentPolicy,
    window_s: Option<f64>,
) -> Result<Discretization, DiscretizationError> {
    let window = window_s.unwrap_or(profile.dt_hydraulic_s);
    if !(window.is_finite() && window > 0.0) {
        return Err(DiscretizationError::InvalidPolicy(format!("window {window} s must be positive")));
    }
    for (k, s) in profile.steps.iter().enumerate() {
        if let Some((p, _)) = model.pipes.iter().zip(&s.pipe_velocity).find(|(_, v)| !v.is_finite()) {
            return Err(DiscretizationError::NonfiniteVelocity {
                step: k,
                pipe: p.id.to_string(),
            });
        }
    }
    let dt_h = profile.dt_hydraulic_s;

    let steps = match policy {
        SegmentPolicy::Fixed { segments, dt } => {
            if segments == 0 {
                return Err(DiscretizationError::InvalidPolicy("segment count must be at least 1".into()));
            }
            let counts = vec![segments; model.pipes.len()];
            let limit = profile
                .steps
                .iter()
                .map(|s| stability_limit(model, &counts, &s.pipe_velocity))
                .fold(f64::INFINITY, f64::min);
            let (dt, k_f) = match dt {
                Some(dt) => {
                    if !(dt.is_finite() && dt > 0.0) {
                        return Err(DiscretizationError::InvalidPolicy(format!("dt {dt} s must be positive")));
                    }
                    if dt > limit * (1.0 + ROUNDING_SLACK) {
                        return Err(DiscretizationError::UnstableRequest { requested: dt, limit });
                    }
                    let k_f = (window / dt).round();
                    if ((window / dt) - k_f).abs() > 1e-6 || k_f < 1.0 {
                        return Err(DiscretizationError::InvalidPolicy(format!(
                            "window {window} s is not a whole number of {dt} s steps"
                        )));
                    }
                    (dt, k_f as usize)
                }
                None if limit.is_infinite() => (window, 1),
                None => {
                    let k_f = steps_for(window, limit);
                    (window / k_f as f64, k_f)
                }
            };
            profile
                .steps
                .iter()
                .map(|s| finish(model, counts.clone(), &s.pipe_velocity, dt, k_f, dt_h))
                .collect()
        }
        SegmentPolicy::Dynamic { dt_target } => {
            if !(dt_target.is_finite() && dt_target > 0.0) {
                return Err(DiscretizationError::InvalidPolicy(format!("dt target {dt_target} s must be positive")));
            }
            let moving_counts: Vec<Vec<Option<usize>>> = profile
                .steps
                .iter()
                .map(|s| {
                    model
                        .pipes
                        .iter()
                        .zip(&s.pipe_velocity)
                        .map(|(p, v)| {
                            (*v != 0.0).then(|| ((p.length / (v.abs() * dt_target)) - ROUNDING_SLACK).ceil().max(1.0) as usize)
                        })
                        .collect()
                })
                .collect();
            // stagnant pipes keep the finest resolution they reach elsewhere
            let idle: Vec<usize> = (0..model.pipes.len())
                .map(|i| moving_counts.iter().filter_map(|c| c[i]).max().unwrap_or(1))
                .collect();
            profile
                .steps
                .iter()
                .zip(moving_counts)
                .map(|(s, counts)| {
                    let counts: Vec<usize> = counts.iter().zip(&idle).map(|(c, i)| c.unwrap_or(*i)).collect();
                    let limit = stability_limit(model, &counts, &s.pipe_velocity);
                    let dt = dt_target.min(limit);
                    let k_f = steps_for(window, dt);
                    finish(model, counts, &s.pipe_velocity, window / k_f as f64, k_f, dt_h)
                })
                .collect()
        }
    };
    Ok(Discretization {
        policy,
        window_s: window,
        steps,
    })
}
