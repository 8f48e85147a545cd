//! The simplified photometric image-formation model.
//!
//! A single virtual light sits at the camera optical center with its
//! principal direction along the camera forward axis, so light spread and
//! lens vignetting collapse into one factor `cos^k(alpha)`. Predicted
//! intensity for a surface point `x` with unit normal `n` at frame `t` is
//!
//! ```text
//! I = ( cos^k(alpha) * sigma_o / |x|^2 * f_r(theta) * cos(theta) * g_t )^(1/gamma)
//! ```
//!
//! where `alpha` is the off-axis angle of `x` and `theta` the incidence
//! angle between the direction back to the camera and `n`. Intensities are
//! normalized so that 8-bit gray level 255 maps to 1.0. The value is not
//! clamped above: saturation is a property of the sensor (applied when
//! rendering), not of the model.

use nalgebra::Vector3;
use thiserror::Error;

/// Number of reflectance samples over the incidence-angle domain.
pub const BRDF_KNOTS: usize = 15;

/// Gray levels per unit normalized intensity.
pub const GRAY_LEVELS: f64 = 255.0;

/// Points closer than this to the optical center are rejected; the
/// inverse-square law diverges and no real working distance is below it.
pub const MIN_DISTANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PhotometricError {
    #[error("off-axis angle {0} is outside [0, pi/2)")]
    AlphaOutOfRange(f64),
    #[error("surface point is within {MIN_DISTANCE} m of the optical center")]
    TooClose,
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("frame index {0} has no gain entry")]
    MissingGain(usize),
    #[error("canonical division by zero: {0}")]
    ZeroDivisor(&'static str),
}

/// Reflectance sampled at equally spaced incidence angles over [0, pi/2],
/// evaluated by linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct BrdfTable {
    knots: [f64; BRDF_KNOTS],
}

impl BrdfTable {
    pub fn new(knots: [f64; BRDF_KNOTS]) -> Result<Self, PhotometricError> {
        if knots.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(PhotometricError::InvalidParameter(
                "BRDF knots must be finite and non-negative".into(),
            ));
        }
        Ok(Self { knots })
    }

    /// Angle of the `i`-th knot in radians.
    pub fn knot_angle(i: usize) -> f64 {
        i as f64 * std::f64::consts::FRAC_PI_2 / (BRDF_KNOTS - 1) as f64
    }

    pub fn knots(&self) -> &[f64; BRDF_KNOTS] {
        &self.knots
    }

    /// Interpolation weights for an angle: indices of the two surrounding
    /// knots and the weight of the second one.
    pub fn interp_weights(theta: f64) -> (usize, usize, f64) {
        let step = std::f64::consts::FRAC_PI_2 / (BRDF_KNOTS - 1) as f64;
        let t = (theta / step).clamp(0.0, (BRDF_KNOTS - 1) as f64);
        let i = (t.floor() as usize).min(BRDF_KNOTS - 2);
        (i, i + 1, t - i as f64)
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let (i, j, w) = Self::interp_weights(theta);
        self.knots[i] * (1.0 - w) + self.knots[j] * w
    }
}

/// Surface reflectance: ideal diffuse or a sampled table.
#[derive(Debug, Clone, PartialEq)]
pub enum Brdf {
    /// `f_r(theta) = albedo / pi`, independent of angle.
    Lambertian { albedo: f64 },
    Sampled(BrdfTable),
}

impl Brdf {
    pub fn lambertian(albedo: f64) -> Result<Self, PhotometricError> {
        if !(albedo > 0.0) {
            return Err(PhotometricError::InvalidParameter(format!(
                "albedo must be positive, got {albedo}"
            )));
        }
        Ok(Brdf::Lambertian { albedo })
    }

    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            Brdf::Lambertian { albedo } => albedo / std::f64::consts::PI,
            Brdf::Sampled(table) => table.eval(theta),
        }
    }
}

/// Joint spread/vignetting attenuation `cos^k(alpha)`.
pub fn spread(alpha: f64, k: f64) -> Result<f64, PhotometricError> {
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&alpha) {
        return Err(PhotometricError::AlphaOutOfRange(alpha));
    }
    Ok(alpha.cos().powf(k))
}

/// Calibrated photometric model for one camera/light rig.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricModel {
    /// Spread exponent of the joint light/vignetting falloff.
    pub k: f64,
    /// Source radiance; a fixed gauge constant, never optimized. Per-frame
    /// gains absorb its scale.
    pub sigma_o: f64,
    /// Gamma-correction exponent.
    pub gamma: f64,
    /// Per-frame auto-gain factors.
    pub gains: Vec<f64>,
    pub brdf: Brdf,
}

impl PhotometricModel {
    pub fn new(
        k: f64,
        gamma: f64,
        gains: Vec<f64>,
        brdf: Brdf,
    ) -> Result<Self, PhotometricError> {
        Self::with_sigma(k, 1.0, gamma, gains, brdf)
    }

    pub fn with_sigma(
        k: f64,
        sigma_o: f64,
        gamma: f64,
        gains: Vec<f64>,
        brdf: Brdf,
    ) -> Result<Self, PhotometricError> {
        if !(k >= 0.0) {
            return Err(PhotometricError::InvalidParameter(format!(
                "spread exponent must be >= 0, got {k}"
            )));
        }
        if !(sigma_o > 0.0) {
            return Err(PhotometricError::InvalidParameter(format!(
                "sigma_o must be positive, got {sigma_o}"
            )));
        }
        if !(gamma > 0.0) {
            return Err(PhotometricError::InvalidParameter(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if gains.is_empty() || gains.iter().any(|&g| !(g > 0.0)) {
            return Err(PhotometricError::InvalidParameter(
                "need at least one positive gain".into(),
            ));
        }
        Ok(Self {
            k,
            sigma_o,
            gamma,
            gains,
            brdf,
        })
    }

    pub fn gain(&self, t: usize) -> Result<f64, PhotometricError> {
        self.gains
            .get(t)
            .copied()
            .ok_or(PhotometricError::MissingGain(t))
    }

    /// The linear radiance product before gamma:
    /// `cos^k(alpha) * sigma_o / d^2 * f_r(theta) * cos(theta) * g_t`.
    /// Back-facing geometry (`cos(theta) < 0`) clamps to zero.
    pub fn radiance_product(
        &self,
        x: &Vector3<f64>,
        n: &Vector3<f64>,
        t: usize,
    ) -> Result<f64, PhotometricError> {
        let d2 = x.norm_squared();
        if d2 < MIN_DISTANCE * MIN_DISTANCE {
            return Err(PhotometricError::TooClose);
        }
        let d = d2.sqrt();
        let cos_alpha = x.z / d;
        if !(cos_alpha > 0.0) {
            return Err(PhotometricError::AlphaOutOfRange(cos_alpha.acos()));
        }
        // Direction from the surface point back to the optical center; the
        // incoming and reflected rays coincide with it.
        let to_camera = -x / d;
        let cos_theta = to_camera.dot(n).max(0.0);
        let theta = cos_theta.min(1.0).acos();
        let g = self.gain(t)?;
        Ok(cos_alpha.powf(self.k) * self.sigma_o / d2 * self.brdf.eval(theta) * cos_theta * g)
    }

    /// Predicted intensity for a surface point `x` (camera frame) with unit
    /// normal `n` at frame `t`. Non-negative; exceeds 1 when the configured
    /// exposure would saturate the sensor (rendering clamps, the model does
    /// not).
    pub fn predict_intensity(
        &self,
        x: &Vector3<f64>,
        n: &Vector3<f64>,
        t: usize,
    ) -> Result<f64, PhotometricError> {
        Ok(self.radiance_product(x, n, t)?.powf(1.0 / self.gamma))
    }

    /// Canonical intensity: observed intensity with spread, frontal BRDF,
    /// gain, gamma and source radiance divided out. For a surface obeying
    /// the model this equals `cos(theta) / d^2`.
    pub fn canonical_intensity(
        &self,
        intensity: f64,
        ray: &Vector3<f64>,
        t: usize,
    ) -> Result<f64, PhotometricError> {
        let cos_alpha = ray.z / ray.norm();
        if !(cos_alpha > 0.0) {
            return Err(PhotometricError::AlphaOutOfRange(cos_alpha.acos()));
        }
        let mu = cos_alpha.powf(self.k);
        let fr0 = self.brdf.eval(0.0);
        let g = self.gain(t)?;
        if mu <= 0.0 {
            return Err(PhotometricError::ZeroDivisor("spread"));
        }
        if fr0 <= 0.0 {
            return Err(PhotometricError::ZeroDivisor("frontal BRDF"));
        }
        if g <= 0.0 {
            return Err(PhotometricError::ZeroDivisor("gain"));
        }
        Ok(intensity.powf(self.gamma) / (mu * fr0 * g * self.sigma_o))
    }
}
