//! Closed-form horizon length under constant step accuracy and no
//! self-correction, plus a Monte-Carlo oracle for it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonLength {
    /// Smallest H with p^H ≤ s.
    pub exact: u64,
    /// ln(s) / ln(p).
    pub continuous: f64,
}

fn open_unit(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {x} must lie in (0, 1)")))
    }
}

pub fn horizon_length(p: f64, s: f64) -> Result<HorizonLength> {
    open_unit("p", p)?;
    open_unit("s", s)?;
    let continuous = s.ln() / p.ln();
    // settle rounding at integer boundaries against p^H ≤ s < p^(H-1)
    let mut exact = continuous.ceil().max(1.0) as u64;
    while exact > 1 && p.powf((exact - 1) as f64) <= s {
        exact -= 1;
    }
    while p.powf(exact as f64) > s {
        exact += 1;
    }
    Ok(HorizonLength { exact, continuous })
}

/// Step accuracy whose continuous horizon at `s` equals `steps`.
pub fn required_step_accuracy(steps: f64, s: f64) -> Result<f64> {
    if steps.is_nan() || steps < 1.0 {
        return Err(Error::invalid(format!("horizon {steps} must be >= 1")));
    }
    open_unit("s", s)?;
    Ok(s.powf(1.0 / steps))
}

/// dH_s/dp of the continuous horizon: ln(1/s) / (p (ln p)^2).
pub fn sensitivity(p: f64, s: f64) -> Result<f64> {
    open_unit("p", p)?;
    open_unit("s", s)?;
    let lp = p.ln();
    Ok((1.0 / s).ln() / (p * lp * lp))
}

/// H_0.5 ≈ ln 2 / (1 - p), valid for p near 1.
pub fn near_perfect_horizon(p: f64) -> Result<f64> {
    open_unit("p", p)?;
    Ok(std::f64::consts::LN_2 / (1.0 - p))
}

/// dH_0.5/dp ≈ ln 2 / (1 - p)^2, valid for p near 1.
pub fn near_perfect_sensitivity(p: f64) -> Result<f64> {
    open_unit("p", p)?;
    Ok(std::f64::consts::LN_2 / ((1.0 - p) * (1.0 - p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub t: u32,
    pub step_accuracy: f64,
    pub horizon: f64,
}

/// Step accuracy `2^(-1/2^t)` needed for H_0.5 to double every unit of t,
/// with the continuous H_0.5 it yields.
pub fn growth_projection(t_max: u32) -> Vec<GrowthPoint> {
    (0..=t_max)
        .map(|t| {
            let step_accuracy = (-(-(t as f64)).exp2()).exp2();
            GrowthPoint {
                t,
                step_accuracy,
                horizon: -std::f64::consts::LN_2 / step_accuracy.ln(),
            }
        })
        .collect()
}

/// Simulates `n_chains` Bernoulli(p) step chains for `turns` steps and
/// returns the fraction with no failure through each step.
///
/// Each chain has its own derived seed, so the curve does not depend on how
/// chains are spread over threads.
pub fn monte_carlo_task_accuracy(p: f64, turns: usize, n_chains: usize, seed: u64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("p = {p} must lie in (0, 1]")));
    }
    if n_chains == 0 {
        return Err(Error::invalid("n_chains must be >= 1"));
    }
    // failures[t] counts chains whose first failure is at step t + 1
    let failures = (0..n_chains as u64)
        .into_par_iter()
        .fold(
            || vec![0u64; turns],
            |mut acc, chain| {
                let mut rng = seed::stream_rng(seed, domain::CHAIN, chain);
                if let Some(slot) = acc.iter_mut().find(|_| rng.gen::<f64>() >= p) {
                    *slot += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; turns],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut alive = n_chains as u64;
    Ok(failures
        .into_iter()
        .map(|f| {
            alive -= f;
            alive as f64 / n_chains as f64
        })
        .collect())
}
