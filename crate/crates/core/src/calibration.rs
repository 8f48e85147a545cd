//! Joint photometric calibration from point-sampled observations.
//!
//! Recovers the spread exponent `k`, optionally gamma, one gain per frame
//! and optionally a 15-knot sampled BRDF by minimizing the Huber-robustified
//! photometric error between observed intensities and the model prediction.
//! The source radiance `sigma_o` is pinned to 1 to fix the gain gauge; when
//! the BRDF knots are estimated, the reference frame's gain is additionally
//! pinned to 1 because a global knot scale trades off against the gains.
//!
//! The solver is iteratively reweighted Gauss-Newton with Levenberg damping:
//! the parameter vector is small and dense and all Jacobians are analytic.
//! Gains and gamma are optimized in log space so positivity is structural;
//! knot non-negativity is enforced by projection.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::photometry::{
    Brdf, BrdfTable, PhotometricModel, BRDF_KNOTS, GRAY_LEVELS, MIN_DISTANCE,
};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("under-determined problem: {0}")]
    UnderDetermined(String),
    #[error("gauge failure: all observations are saturated")]
    Saturated,
    #[error("bad observations: {0}")]
    BadObservations(String),
    #[error("solver diverged: {0}")]
    Diverged(String),
}

/// One photometric sample: a 3D point on the pattern, expressed in the
/// camera frame of its frame index, with the observed intensity in [0, 1].
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub frame: usize,
    pub point: usize,
    pub intensity: f64,
    pub x: Vector3<f64>,
}

/// BRDF treatment during calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BrdfMode {
    /// Assume ideal diffuse reflectance with the given albedo.
    FixedLambertian { albedo: f64 },
    /// Estimate reflectance at 15 incidence angles (non-negative knots).
    EstimateKnots,
}

#[derive(Debug, Clone)]
pub struct CalibOptions {
    pub brdf_mode: BrdfMode,
    /// Optimize gamma; when false it stays at `fixed_gamma`.
    pub estimate_gamma: bool,
    pub fixed_gamma: f64,
    /// Huber scale for the robust loss, in gray levels.
    pub huber_scale_gray: f64,
    pub max_iterations: usize,
    /// Relative cost decrease below which the solve stops.
    pub cost_tolerance: f64,
    /// Spread exponent initialization (natural vignetting prior).
    pub init_k: f64,
}

impl Default for CalibOptions {
    fn default() -> Self {
        Self {
            brdf_mode: BrdfMode::FixedLambertian { albedo: 1.0 },
            estimate_gamma: false,
            fixed_gamma: 2.2,
            huber_scale_gray: 3.0,
            max_iterations: 200,
            cost_tolerance: 1e-10,
            init_k: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibProblem {
    pub observations: Vec<Observation>,
    pub options: CalibOptions,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FrameResiduals {
    pub frame: usize,
    pub count: usize,
    pub mean_gray: f64,
    pub std_gray: f64,
}

/// Calibration output. `model.gains[i]` is the gain of `frame_ids[i]`.
#[derive(Debug, Clone)]
pub struct CalibResult {
    pub model: PhotometricModel,
    pub frame_ids: Vec<usize>,
    pub residual_mean_gray: f64,
    pub residual_std_gray: f64,
    pub per_frame: Vec<FrameResiduals>,
    /// True when the residual summary was computed on held-out data.
    pub on_validation: bool,
    /// Knot indices whose angle was never sampled by the data (only in
    /// knot-estimation mode); their values are damped, not measured.
    pub unsampled_knots: Vec<usize>,
    pub report: ConvergenceReport,
}

/// Per-frame pattern normal recovered by fitting a plane to the frame's
/// sample points; the observation table carries no normals, but a planar
/// pattern implies them. Oriented toward the camera.
fn fit_frame_normals(
    obs: &[Observation],
    frame_of: &[usize],
    n_frames: usize,
) -> Result<Vec<Vector3<f64>>, CalibError> {
    let mut centroids = vec![Vector3::zeros(); n_frames];
    let mut counts = vec![0usize; n_frames];
    for (o, &f) in obs.iter().zip(frame_of) {
        centroids[f] += o.x;
        counts[f] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n < 3 {
            return Err(CalibError::BadObservations(format!(
                "a frame has only {n} points; plane fit needs at least 3"
            )));
        }
        *c /= n as f64;
    }
    let mut scatter = vec![nalgebra::Matrix3::<f64>::zeros(); n_frames];
    for (o, &f) in obs.iter().zip(frame_of) {
        let d = o.x - centroids[f];
        scatter[f] += d * d.transpose();
    }
    let mut normals = Vec::with_capacity(n_frames);
    for (f, m) in scatter.iter().enumerate() {
        let eig = nalgebra::SymmetricEigen::new(*m);
        let mut min_i = 0;
        for i in 1..3 {
            if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
                min_i = i;
            }
        }
        // Planarity: the smallest scatter direction must be far below the
        // in-plane ones.
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        if vals[1] < 1e-12 || vals[0] / vals[1] > 0.1 {
            return Err(CalibError::BadObservations(format!(
                "frame {f} points are not planar enough for a normal fit"
            )));
        }
        let mut n: Vector3<f64> = eig.eigenvectors.column(min_i).into();
        if n.dot(&centroids[f]) > 0.0 {
            n = -n;
        }
        normals.push(n.normalize());
    }
    Ok(normals)
}

/// Dense parameter layout for the solver.
struct Layout {
    estimate_gamma: bool,
    estimate_knots: bool,
    /// Per dense-frame gain parameter column, or `None` when pinned.
    gain_col: Vec<Option<usize>>,
    n_params: usize,
}

impl Layout {
    const K: usize = 0;

    fn new(n_frames: usize, estimate_gamma: bool, estimate_knots: bool) -> Self {
        let mut col = 1;
        if estimate_gamma {
            col += 1;
        }
        let mut gain_col = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            // Knot scale trades off against a global gain scale: pin the
            // first frame when estimating the BRDF.
            if estimate_knots && f == 0 {
                gain_col.push(None);
            } else {
                gain_col.push(Some(col));
                col += 1;
            }
        }
        let knots_start = col;
        if estimate_knots {
            col += BRDF_KNOTS;
        }
        let _ = knots_start;
        Self {
            estimate_gamma,
            estimate_knots,
            gain_col,
            n_params: col,
        }
    }

    fn gamma_col(&self) -> Option<usize> {
        self.estimate_gamma.then_some(1)
    }

    fn knot_col(&self, i: usize) -> usize {
        debug_assert!(self.estimate_knots);
        self.n_params - BRDF_KNOTS + i
    }
}

/// Current parameter state in natural units.
#[derive(Clone)]
struct State {
    k: f64,
    gamma: f64,
    gains: Vec<f64>,
    knots: [f64; BRDF_KNOTS],
    lambertian_fr: f64,
    estimate_knots: bool,
}

impl State {
    fn fr(&self, theta: f64) -> (f64, usize, usize, f64) {
        if self.estimate_knots {
            let (i, j, w) = BrdfTable::interp_weights(theta);
            (self.knots[i] * (1.0 - w) + self.knots[j] * w, i, j, w)
        } else {
            (self.lambertian_fr, 0, 0, 0.0)
        }
    }

    fn apply_step(&mut self, layout: &Layout, delta: &DVector<f64>) {
        self.k += delta[Layout::K];
        if let Some(c) = layout.gamma_col() {
            self.gamma = (self.gamma.ln() + delta[c]).exp();
        }
        for (f, col) in layout.gain_col.iter().enumerate() {
            if let Some(c) = col {
                self.gains[f] = (self.gains[f].ln() + delta[*c]).exp();
            }
        }
        if layout.estimate_knots {
            for i in 0..BRDF_KNOTS {
                self.knots[i] = (self.knots[i] + delta[layout.knot_col(i)]).max(0.0);
            }
        }
    }
}

struct PreparedObs {
    intensity: f64,
    cos_alpha: f64,
    ln_cos_alpha: f64,
    inv_d2: f64,
    theta: f64,
    cos_theta: f64,
    frame: usize,
}

fn prediction(state: &State, o: &PreparedObs) -> (f64, f64, f64, usize, usize, f64) {
    let (fr, ki, kj, kw) = state.fr(o.theta);
    let p = o.cos_alpha.powf(state.k) * o.inv_d2 * fr * o.cos_theta * state.gains[o.frame];
    let pred = if p > 0.0 {
        p.powf(1.0 / state.gamma)
    } else {
        0.0
    };
    (pred, p, fr, ki, kj, kw)
}

fn huber_cost(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn robust_cost(state: &State, obs: &[PreparedObs], delta: f64) -> f64 {
    obs.iter()
        .map(|o| huber_cost(o.intensity - prediction(state, o).0, delta))
        .sum()
}

/// Solves the calibration problem. Returns the recovered model with its
/// residual summary computed on `validation` when given, else on the
/// training observations.
pub fn solve_calibration(
    problem: &CalibProblem,
    validation: Option<&[Observation]>,
) -> Result<CalibResult, CalibError> {
    let obs = &problem.observations;
    let opts = &problem.options;

    // Dense frame remapping in ascending frame-id order.
    let mut frame_ids: Vec<usize> = obs.iter().map(|o| o.frame).collect();
    frame_ids.sort_unstable();
    frame_ids.dedup();
    if frame_ids.len() < 2 {
        return Err(CalibError::UnderDetermined(format!(
            "need at least 2 frames, got {}",
            frame_ids.len()
        )));
    }
    if obs.len() < 50 {
        return Err(CalibError::UnderDetermined(format!(
            "need at least 50 observations, got {}",
            obs.len()
        )));
    }
    if obs.iter().all(|o| o.intensity >= 1.0 - 1e-9) {
        return Err(CalibError::Saturated);
    }
    for o in obs {
        if !(o.x.z > 0.0) || o.x.norm() < MIN_DISTANCE {
            return Err(CalibError::BadObservations(format!(
                "point {} in frame {} is behind or too close to the camera",
                o.point, o.frame
            )));
        }
        if !(0.0..=1.0).contains(&o.intensity) {
            return Err(CalibError::BadObservations(format!(
                "intensity {} outside [0, 1]",
                o.intensity
            )));
        }
    }
    let n_frames = frame_ids.len();
    let dense_of = |frame: usize| frame_ids.binary_search(&frame).expect("frame id present");
    let frame_of: Vec<usize> = obs.iter().map(|o| dense_of(o.frame)).collect();

    let normals = fit_frame_normals(obs, &frame_of, n_frames)?;

    let prepared: Vec<PreparedObs> = obs
        .iter()
        .zip(&frame_of)
        .map(|(o, &f)| {
            let d = o.x.norm();
            let xhat = o.x / d;
            let cos_theta = (-xhat).dot(&normals[f]).max(0.0);
            PreparedObs {
                intensity: o.intensity,
                cos_alpha: xhat.z,
                ln_cos_alpha: xhat.z.ln(),
                inv_d2: 1.0 / (d * d),
                theta: cos_theta.min(1.0).acos(),
                cos_theta,
                frame: f,
            }
        })
        .collect();

    let estimate_knots = opts.brdf_mode == BrdfMode::EstimateKnots;
    let layout = Layout::new(n_frames, opts.estimate_gamma, estimate_knots);
    let delta_huber = opts.huber_scale_gray / GRAY_LEVELS;

    let mut state = State {
        k: opts.init_k,
        gamma: opts.fixed_gamma,
        gains: vec![1.0; n_frames],
        knots: [1.0 / std::f64::consts::PI; BRDF_KNOTS],
        lambertian_fr: match opts.brdf_mode {
            BrdfMode::FixedLambertian { albedo } => albedo / std::f64::consts::PI,
            BrdfMode::EstimateKnots => 1.0 / std::f64::consts::PI,
        },
        estimate_knots,
    };

    // Warm-start the gains: per frame, the median of I^gamma over the
    // model's geometric factors at the initial k. Keeps the robust loss in
    // its informative regime from the first iteration.
    {
        let mut per_frame: Vec<Vec<f64>> = vec![Vec::new(); n_frames];
        for o in &prepared {
            let (_, p, _, _, _, _) = prediction(&state, o);
            if p > 1e-30 {
                let base = p / state.gains[o.frame];
                per_frame[o.frame].push(o.intensity.powf(state.gamma) / base);
            }
        }
        for (f, vals) in per_frame.iter_mut().enumerate() {
            if layout.gain_col[f].is_some() && !vals.is_empty() {
                vals.sort_by(f64::total_cmp);
                let g = vals[vals.len() / 2];
                if g > 1e-12 {
                    state.gains[f] = g;
                }
            }
        }
    }

    let n = prepared.len();
    let mut cost = robust_cost(&state, &prepared, delta_huber);
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = false;

    let mut jac = DMatrix::<f64>::zeros(n, layout.n_params);
    let mut res = DVector::<f64>::zeros(n);
    let mut weights = DVector::<f64>::zeros(n);

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        jac.fill(0.0);
        for (row, o) in prepared.iter().enumerate() {
            let (pred, p, fr, ki, kj, kw) = prediction(&state, o);
            let r = o.intensity - pred;
            res[row] = r;
            weights[row] = if r.abs() <= delta_huber {
                1.0
            } else {
                delta_huber / r.abs()
            };
            if p <= 1e-30 {
                continue; // no usable gradient for a dark/back-facing sample
            }
            let inv_gamma = 1.0 / state.gamma;
            jac[(row, Layout::K)] = pred * o.ln_cos_alpha * inv_gamma;
            if let Some(c) = layout.gamma_col() {
                jac[(row, c)] = -pred * p.ln() * inv_gamma;
            }
            if let Some(c) = layout.gain_col[o.frame] {
                jac[(row, c)] = pred * inv_gamma;
            }
            if layout.estimate_knots && fr > 1e-30 {
                jac[(row, layout.knot_col(ki))] += pred * (1.0 - kw) / (state.gamma * fr);
                jac[(row, layout.knot_col(kj))] += pred * kw / (state.gamma * fr);
            }
        }

        // Weighted normal equations with Marquardt damping.
        let wj = DMatrix::from_fn(n, layout.n_params, |r, c| jac[(r, c)] * weights[r]);
        let mut a = jac.transpose() * &wj;
        let b = jac.transpose() * DVector::from_fn(n, |r, _| weights[r] * res[r]);
        let diag_floor = 1e-12;
        for i in 0..layout.n_params {
            a[(i, i)] += lambda * a[(i, i)].max(diag_floor);
        }
        let Some(chol) = a.cholesky() else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Err(CalibError::Diverged(
                    "normal equations stayed indefinite under damping".into(),
                ));
            }
            continue;
        };
        let delta = chol.solve(&b);

        let mut trial = state.clone();
        trial.apply_step(&layout, &delta);
        let trial_cost = robust_cost(&trial, &prepared, delta_huber);
        if trial_cost <= cost {
            let rel_drop = (cost - trial_cost) / cost.max(1e-300);
            state = trial;
            cost = trial_cost;
            lambda = (lambda / 3.0).max(1e-12);
            if rel_drop < opts.cost_tolerance {
                converged = true;
                break;
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e12 {
                // Damping has shrunk the step to nothing: local minimum.
                converged = true;
                break;
            }
        }
    }

    // Assemble the model.
    let brdf = if estimate_knots {
        Brdf::Sampled(
            BrdfTable::new(state.knots)
                .map_err(|e| CalibError::Diverged(format!("invalid recovered knots: {e}")))?,
        )
    } else {
        match opts.brdf_mode {
            BrdfMode::FixedLambertian { albedo } => Brdf::Lambertian { albedo },
            BrdfMode::EstimateKnots => unreachable!(),
        }
    };
    let model = PhotometricModel::new(state.k.max(0.0), state.gamma, state.gains.clone(), brdf)
        .map_err(|e| CalibError::Diverged(format!("invalid recovered model: {e}")))?;

    // Knots beyond the largest sampled incidence angle are unconstrained.
    let unsampled_knots = if estimate_knots {
        let max_theta = prepared.iter().map(|o| o.theta).fold(0.0, f64::max);
        (0..BRDF_KNOTS)
            .filter(|&i| BrdfTable::knot_angle(i) > max_theta)
            .collect()
    } else {
        Vec::new()
    };

    // Residual summary, on held-out observations when provided.
    let (eval_obs, on_validation) = match validation {
        Some(v) => (v, true),
        None => (obs.as_slice(), false),
    };
    let eval = evaluate_model_with_frames(&model, eval_obs, &frame_ids)?;

    Ok(CalibResult {
        model,
        frame_ids,
        residual_mean_gray: eval.mean_gray,
        residual_std_gray: eval.std_gray,
        per_frame: eval.per_frame,
        on_validation,
        unsampled_knots,
        report: ConvergenceReport {
            iterations,
            final_cost: cost,
            converged,
        },
    })
}

/// Residual evaluation of a calibrated model against observations.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// Per-observation residual `I - prediction` in gray levels.
    pub residuals_gray: Vec<f64>,
    pub mean_gray: f64,
    pub std_gray: f64,
    /// Histogram binned at one gray level: (bin center, count).
    pub histogram: Vec<(f64, usize)>,
    pub per_frame: Vec<FrameResiduals>,
    /// Relative prediction error binned over the off-axis angle in 5-degree
    /// bins: (low deg, high deg, mean relative error, sample count). Bins
    /// with zero count were never sampled by the data.
    pub spread_profile: Vec<(f64, f64, f64, usize)>,
    /// Largest off-axis angle present in the data, degrees.
    pub max_alpha_deg: f64,
}

/// Evaluates a model on observations whose frame indices map into
/// `model.gains` through `frame_ids`.
pub fn evaluate_model_with_frames(
    model: &PhotometricModel,
    observations: &[Observation],
    frame_ids: &[usize],
) -> Result<ResidualReport, CalibError> {
    if observations.is_empty() {
        return Err(CalibError::BadObservations("no observations".into()));
    }
    let mut ids: Vec<usize> = observations.iter().map(|o| o.frame).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in &ids {
        if !frame_ids.contains(id) {
            return Err(CalibError::BadObservations(format!(
                "frame {id} has no calibrated gain"
            )));
        }
    }
    // Normals for the evaluation observations (per frame id, dense over ids).
    let frame_of: Vec<usize> = observations
        .iter()
        .map(|o| ids.binary_search(&o.frame).unwrap())
        .collect();
    let normals = fit_frame_normals(observations, &frame_of, ids.len())?;

    let mut residuals_gray = Vec::with_capacity(observations.len());
    let mut per_frame_acc: Vec<(usize, f64, f64)> = ids.iter().map(|&f| (f, 0.0, 0.0)).collect();
    let mut per_frame_n = vec![0usize; ids.len()];
    const N_ALPHA_BINS: usize = 18;
    let mut bin_err = vec![0.0f64; N_ALPHA_BINS];
    let mut bin_n = vec![0usize; N_ALPHA_BINS];
    let mut max_alpha_deg = 0.0f64;

    for (o, &fd) in observations.iter().zip(&frame_of) {
        let gain_index = frame_ids
            .binary_search(&o.frame)
            .expect("frame id checked above");
        let pred = model
            .predict_intensity(&o.x, &normals[fd], gain_index)
            .map_err(|e| CalibError::BadObservations(format!("prediction failed: {e}")))?;
        let r_gray = (o.intensity - pred) * GRAY_LEVELS;
        residuals_gray.push(r_gray);
        per_frame_acc[fd].1 += r_gray;
        per_frame_acc[fd].2 += r_gray * r_gray;
        per_frame_n[fd] += 1;

        let alpha = (o.x.z / o.x.norm()).clamp(-1.0, 1.0).acos().to_degrees();
        max_alpha_deg = max_alpha_deg.max(alpha);
        let bin = ((alpha / 5.0) as usize).min(N_ALPHA_BINS - 1);
        if pred > 1e-12 {
            bin_err[bin] += ((o.intensity - pred) / pred).abs();
            bin_n[bin] += 1;
        }
    }

    let n = residuals_gray.len() as f64;
    let mean = residuals_gray.iter().sum::<f64>() / n;
    let var = residuals_gray.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;

    // Histogram at one-gray-level bins centered on integers.
    let lo = residuals_gray.iter().copied().fold(f64::INFINITY, f64::min).floor() as i64;
    let hi = residuals_gray.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
    let mut histogram = Vec::new();
    let mut counts = std::collections::BTreeMap::new();
    for r in &residuals_gray {
        *counts.entry(r.round() as i64) .or_insert(0usize) += 1;
    }
    for b in lo..=hi {
        histogram.push((b as f64, counts.get(&b).copied().unwrap_or(0)));
    }

    let per_frame = per_frame_acc
        .iter()
        .zip(&per_frame_n)
        .map(|(&(frame, s, s2), &cnt)| {
            let m = s / cnt as f64;
            FrameResiduals {
                frame,
                count: cnt,
                mean_gray: m,
                std_gray: (s2 / cnt as f64 - m * m).max(0.0).sqrt(),
            }
        })
        .collect();

    let spread_profile = (0..N_ALPHA_BINS)
        .map(|b| {
            let mean_rel = if bin_n[b] > 0 {
                bin_err[b] / bin_n[b] as f64
            } else {
                0.0
            };
            (b as f64 * 5.0, (b + 1) as f64 * 5.0, mean_rel, bin_n[b])
        })
        .collect();

    Ok(ResidualReport {
        residuals_gray,
        mean_gray: mean,
        std_gray: var.sqrt(),
        histogram,
        per_frame,
        spread_profile,
        max_alpha_deg,
    })
}

/// Evaluates a model against observations whose frame indices index
/// `model.gains` directly.
pub fn evaluate_model(
    model: &PhotometricModel,
    observations: &[Observation],
) -> Result<ResidualReport, CalibError> {
    let frame_ids: Vec<usize> = (0..model.gains.len()).collect();
    evaluate_model_with_frames(model, observations, &frame_ids)
}
