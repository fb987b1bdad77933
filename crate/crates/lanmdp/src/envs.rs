//! Curve-drawing task: trace cubic polynomials left to right.
//!
//! The state is a point `(x, y)`; the action is the vertical move for one
//! fixed horizontal step. Demonstrations are dense grid samples of random
//! cubics with visible curvature, generated by Hermite interpolation of
//! random endpoint values and slopes. Rollout quality is scored by fitting
//! a cubic to the produced points: curved enough and close to the fit
//! means the policy stayed on the manifold the demos came from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AffineTransition;
use crate::training::Environment;

pub const DEMO_FORMAT_VERSION: u32 = 1;

/// Curviness bound for accepting a *demonstration* cubic.
pub const DEMO_CURVINESS_MIN: f64 = 1.0;
/// Curviness bound for accepting a *rolled-out* trajectory's fit.
pub const EVAL_CURVINESS_MIN: f64 = 0.5;
/// Slack on the in-range check so grid points landing exactly on the
/// boundary (e.g. the unit cubic at x = 1) stay acceptable.
pub const RANGE_EPS: f64 = 1e-9;
/// Endpoint slopes for demo generation are drawn from this interval.
pub const SLOPE_RANGE: (f64, f64) = (-4.0, 4.0);
/// Rejection-sampling cap for one demonstration.
pub const MAX_DEMO_RETRIES: usize = 10_000;

// ---------------------------------------------------------------------------
// Task geometry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveEnvConfig {
    /// Horizontal advance per step.
    pub h: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Default for CurveEnvConfig {
    fn default() -> Self {
        CurveEnvConfig { h: 0.1, x_range: (-1.0, 1.0), y_range: (-1.0, 1.0) }
    }
}

impl CurveEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::config("step size must be positive"));
        }
        if self.x_range.0 >= self.x_range.1 || self.y_range.0 >= self.y_range.1 {
            return Err(Error::config("ranges must be ordered (min, max)"));
        }
        if self.horizon() < 4 {
            return Err(Error::config(
                "x range spans fewer than 4 steps; curvature is not measurable",
            ));
        }
        Ok(())
    }

    /// Steps needed to cross the x range.
    pub fn horizon(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.h).round() as usize
    }

    /// Grid abscissas `x_min, x_min + h, ..` across the range.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.horizon()).map(|t| self.x_range.0 + t as f64 * self.h).collect()
    }
}

/// `y = a x^3 + b x^2 + c x + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl CubicCoeffs {
    pub fn eval(&self, x: f64) -> f64 {
        ((self.a * x + self.b) * x + self.c) * x + self.d
    }

    pub fn derivative(&self, x: f64) -> f64 {
        (3.0 * self.a * x + 2.0 * self.b) * x + self.c
    }
}

/// The cubic through `(x0, y0)` and `(x1, y1)` with slopes `d0`, `d1` at
/// the endpoints of the unit interval `[-1, 1]`.
pub fn hermite_cubic(y0: f64, y1: f64, d0: f64, d1: f64) -> CubicCoeffs {
    let a = (d0 + d1) / 4.0 - (y1 - y0) / 4.0;
    let b = (d1 - d0) / 4.0;
    let c = (y1 - y0) / 2.0 - a;
    let d = (y1 + y0) / 2.0 - b;
    CubicCoeffs { a, b, c, d }
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

/// A demonstration: grid points of one accepted cubic, with the generating
/// coefficients kept for reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveDemo {
    /// States `(x, y)` along the grid, length `horizon + 1`.
    pub points: Vec<Vec<f64>>,
    pub coeffs: CubicCoeffs,
}

/// Grid samples of a cubic as environment states.
pub fn cubic_points(coeffs: &CubicCoeffs, cfg: &CurveEnvConfig) -> Vec<Vec<f64>> {
    cfg.grid().iter().map(|&x| vec![x, coeffs.eval(x)]).collect()
}

/// A demo cubic must bend visibly and stay inside the board.
pub fn demo_accepted(coeffs: &CubicCoeffs, cfg: &CurveEnvConfig, min_a: f64) -> bool {
    if coeffs.a.abs() < min_a {
        return false;
    }
    let (lo, hi) = cfg.y_range;
    cfg.grid()
        .iter()
        .all(|&x| {
            let y = coeffs.eval(x);
            y >= lo - RANGE_EPS && y <= hi + RANGE_EPS
        })
}

/// Rejection-samples one demonstration: random endpoint values in the y
/// range, random endpoint slopes, accept when curved and in range. Also
/// reports how many draws the acceptance took.
pub fn sample_cubic_demo(
    cfg: &CurveEnvConfig,
    min_a: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(CurveDemo, usize)> {
    cfg.validate()?;
    if !(min_a > 0.0) {
        return Err(Error::config("demo curviness threshold must be positive"));
    }
    for attempt in 1..=MAX_DEMO_RETRIES {
        let y0 = rng.random_range(cfg.y_range.0..cfg.y_range.1);
        let y1 = rng.random_range(cfg.y_range.0..cfg.y_range.1);
        let d0 = rng.random_range(SLOPE_RANGE.0..SLOPE_RANGE.1);
        let d1 = rng.random_range(SLOPE_RANGE.0..SLOPE_RANGE.1);
        let coeffs = hermite_cubic(y0, y1, d0, d1);
        if demo_accepted(&coeffs, cfg, min_a) {
            return Ok((CurveDemo { points: cubic_points(&coeffs, cfg), coeffs }, attempt));
        }
    }
    Err(Error::RetryLimit {
        attempts: MAX_DEMO_RETRIES,
        hint: "no curved cubic fits the configured y range".into(),
    })
}

/// A demo batch together with the total number of rejection-sampling
/// draws it consumed.
#[derive(Debug, Clone)]
pub struct DemoBatch {
    pub demos: Vec<CurveDemo>,
    pub attempts: usize,
}

impl DemoBatch {
    /// Fraction of draws thrown away.
    pub fn rejection_ratio(&self) -> f64 {
        if self.attempts == 0 {
            return 0.0;
        }
        1.0 - self.demos.len() as f64 / self.attempts as f64
    }
}

pub fn generate_demos(
    cfg: &CurveEnvConfig,
    n: usize,
    min_a: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DemoBatch> {
    let mut demos = Vec::with_capacity(n);
    let mut attempts = 0;
    for _ in 0..n {
        let (demo, tries) = sample_cubic_demo(cfg, min_a, rng)?;
        attempts += tries;
        demos.push(demo);
    }
    Ok(DemoBatch { demos, attempts })
}

/// Actions implied by consecutive states: the vertical moves.
pub fn recover_actions(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points.windows(2).map(|w| vec![w[1][1] - w[0][1]]).collect()
}

// ---------------------------------------------------------------------------
// Fitting and scoring
// ---------------------------------------------------------------------------

/// Least-squares cubic through `(x, y)` points by Householder QR on the
/// Vandermonde system. Returns the coefficients and the mean squared
/// residual. Needs at least 4 points with distinct abscissas.
pub fn cubic_fit(points: &[Vec<f64>]) -> Result<(CubicCoeffs, f64)> {
    let m = points.len();
    if m < 4 {
        return Err(Error::config("cubic fit needs at least 4 points"));
    }
    let mut cols: Vec<Vec<f64>> = (0..4)
        .map(|p| points.iter().map(|s| s[0].powi(3 - p as i32)).collect())
        .collect();
    let mut rhs: Vec<f64> = points.iter().map(|s| s[1]).collect();

    // Householder QR, processing one column at a time.
    let n = 4;
    let mut r = vec![[0.0f64; 4]; 4];
    for k in 0..n {
        let norm: f64 = cols[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::config("cubic fit is degenerate (repeated abscissas)"));
        }
        let alpha = if cols[k][k] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[k][k..].to_vec();
        v[0] -= alpha;
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        if v_norm_sq > 0.0 {
            let apply = |target: &mut [f64]| {
                let dot: f64 = v.iter().zip(target[k..].iter()).map(|(a, b)| a * b).sum();
                let scale = 2.0 * dot / v_norm_sq;
                for (vi, t) in v.iter().zip(target[k..].iter_mut()) {
                    *t -= scale * vi;
                }
            };
            for col in cols.iter_mut().skip(k) {
                apply(col);
            }
            apply(&mut rhs);
        }
        for (j, col) in cols.iter().enumerate().skip(k) {
            r[k][j] = col[k];
        }
    }

    // Back-substitution on the 4x4 upper triangle.
    let mut x = [0.0f64; 4];
    for k in (0..n).rev() {
        let mut acc = rhs[k];
        for j in k + 1..n {
            acc -= r[k][j] * x[j];
        }
        if r[k][k].abs() < 1e-12 {
            return Err(Error::config("cubic fit is degenerate (repeated abscissas)"));
        }
        x[k] = acc / r[k][k];
    }
    let coeffs = CubicCoeffs { a: x[0], b: x[1], c: x[2], d: x[3] };

    let mse = points
        .iter()
        .map(|s| {
            let e = coeffs.eval(s[0]) - s[1];
            e * e
        })
        .sum::<f64>()
        / m as f64;
    Ok((coeffs, mse))
}

/// Quality summary of a rollout batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutEval {
    /// Fraction of rollouts whose cubic fit bends enough.
    pub acceptance_rate: f64,
    /// Mean fit residual over the accepted rollouts; absent if none.
    pub mean_residual: Option<f64>,
    pub n_accepted: usize,
}

/// Fits each rollout and accepts those with curviness above `accept_a`
/// (conventionally [`EVAL_CURVINESS_MIN`]). Residuals are averaged over
/// accepted rollouts only, so the two numbers answer separate questions:
/// how often the policy draws a curve, and how cleanly, when it does.
pub fn evaluate_rollouts(rollouts: &[Vec<Vec<f64>>], accept_a: f64) -> Result<RolloutEval> {
    if rollouts.is_empty() {
        return Err(Error::empty("rollout set"));
    }
    let mut n_accepted = 0usize;
    let mut residual_sum = 0.0;
    for states in rollouts {
        let (coeffs, mse) = cubic_fit(states)?;
        if coeffs.a.abs() > accept_a {
            n_accepted += 1;
            residual_sum += mse;
        }
    }
    let mean_residual =
        if n_accepted > 0 { Some(residual_sum / n_accepted as f64) } else { None };
    Ok(RolloutEval {
        acceptance_rate: n_accepted as f64 / rollouts.len() as f64,
        mean_residual,
        n_accepted,
    })
}

/// Third finite differences of a y series, scaled to jerk units. On exact
/// cubic samples every entry equals `6a` regardless of position.
pub fn finite_difference_jerk(ys: &[f64], h: f64) -> Vec<f64> {
    (3..ys.len())
        .map(|t| (ys[t] - 3.0 * ys[t - 1] + 3.0 * ys[t - 2] - ys[t - 3]) / (h * h * h))
        .collect()
}

/// The trivial goal-reaching baseline: identical vertical moves straight
/// to the goal height. Useful as the contrast for planned paths, which
/// should bend instead.
pub fn shortest_path_reference(y0: f64, goal_y: f64, steps: usize) -> Vec<Vec<f64>> {
    assert!(steps > 0, "need at least one step");
    let per_step = (goal_y - y0) / steps as f64;
    (0..steps).map(|_| vec![per_step]).collect()
}

// ---------------------------------------------------------------------------
// The environment
// ---------------------------------------------------------------------------

/// Rollout adapter: episodes start at the left edge at a random height and
/// advance one grid column per action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveEnv {
    pub cfg: CurveEnvConfig,
}

impl CurveEnv {
    pub fn new(cfg: CurveEnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(CurveEnv { cfg })
    }
}

impl Environment for CurveEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon()
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![self.cfg.x_range.0, rng.random_range(self.cfg.y_range.0..self.cfg.y_range.1)]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        vec![state[0] + self.cfg.h, state[1] + action[0]]
    }
}

/// The task dynamics as an implanted transition model: exact affine mean,
/// configurable observation noise.
pub fn curve_affine_transition(cfg: &CurveEnvConfig, sigma: f64) -> Result<AffineTransition> {
    AffineTransition::new(
        2,
        1,
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0, 1.0],
        vec![cfg.h, 0.0],
        sigma,
    )
}

// ---------------------------------------------------------------------------
// Demo files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DemoFileHeader {
    version: u32,
    config: CurveEnvConfig,
    count: usize,
    /// Opaque caller settings echoed for reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<serde_json::Value>,
}

/// Writes demos as JSON lines: a header object, then one demo per line.
/// `run` is an optional caller-settings echo stored in the header.
pub fn write_demos(
    path: &std::path::Path,
    cfg: &CurveEnvConfig,
    demos: &[CurveDemo],
    run: Option<serde_json::Value>,
) -> Result<()> {
    let mut out = String::new();
    let header =
        DemoFileHeader { version: DEMO_FORMAT_VERSION, config: *cfg, count: demos.len(), run };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for demo in demos {
        out.push_str(&serde_json::to_string(demo)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_demos(path: &std::path::Path) -> Result<(CurveEnvConfig, Vec<CurveDemo>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header_line = lines.next().ok_or_else(|| Error::format("empty demo file"))?;
    let header: DemoFileHeader = serde_json::from_str(header_line)?;
    if header.version != DEMO_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported demo file version {} (expected {DEMO_FORMAT_VERSION})",
            header.version
        )));
    }
    let mut demos = Vec::with_capacity(header.count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        demos.push(serde_json::from_str::<CurveDemo>(line)?);
    }
    if demos.len() != header.count {
        return Err(Error::format(format!(
            "demo file announces {} demos but contains {}",
            header.count,
            demos.len()
        )));
    }
    Ok((header.config, demos))
}
