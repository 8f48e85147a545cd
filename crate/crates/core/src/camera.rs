//! Fisheye camera geometry: projection, unprojection and image undistortion.
//!
//! The lens follows the generic fisheye model of Kannala and Brandt: an
//! equidistant projection `r = f * theta_d` where the distorted angle is an
//! odd polynomial of the true off-axis angle,
//!
//! ```text
//! theta_d = theta * (1 + k1*theta^2 + k2*theta^4 + k3*theta^6 + k4*theta^8)
//! ```
//!
//! Unprojection inverts the polynomial with Newton iteration on the scalar
//! angle. All operations are pure; nothing here holds interior mutability.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{Grid, Image, Mask};

/// Newton iteration cap for inverting the distortion polynomial.
const UNDISTORT_MAX_ITERATIONS: usize = 20;
/// Convergence tolerance on the scalar angle, in radians.
const UNDISTORT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate input point (zero or non-finite)")]
    DegenerateInput,
    #[error("point off-axis angle is not below 90 degrees")]
    OffAxis,
    #[error("distortion inversion did not converge at pixel ({u:.2}, {v:.2})")]
    Unconverged { u: f64, v: f64 },
    #[error("image size {got_w}x{got_h} does not match intrinsics {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// Fisheye intrinsics: four projective parameters, four distortion
/// coefficients and the image size.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k: [f64; 4],
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k: [f64; 4],
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            k,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(CameraError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Distorted angle `theta_d` as a function of the true off-axis angle.
    #[inline]
    pub fn distort_angle(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        theta * (1.0 + t2 * (self.k[0] + t2 * (self.k[1] + t2 * (self.k[2] + t2 * self.k[3]))))
    }

    /// d(theta_d)/d(theta), used by the Newton inversion.
    #[inline]
    fn distort_angle_derivative(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        1.0 + t2
            * (3.0 * self.k[0] + t2 * (5.0 * self.k[1] + t2 * (7.0 * self.k[2] + t2 * 9.0 * self.k[3])))
    }

    /// Inverts `distort_angle` by Newton iteration starting at the distorted
    /// value. The polynomial is monotone over the lens working range.
    fn undistort_angle(&self, theta_d: f64) -> Option<f64> {
        let mut theta = theta_d;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let f = self.distort_angle(theta) - theta_d;
            if f.abs() < UNDISTORT_TOLERANCE {
                return Some(theta);
            }
            let df = self.distort_angle_derivative(theta);
            if df.abs() < 1e-12 {
                return None;
            }
            theta -= f / df;
        }
        if (self.distort_angle(theta) - theta_d).abs() < UNDISTORT_TOLERANCE {
            Some(theta)
        } else {
            None
        }
    }

    /// Projects a 3D point in the camera frame to pixel coordinates.
    ///
    /// The result may fall outside the image bounds; the caller filters.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        let norm = point.norm();
        if !(norm > 0.0) || !point.iter().all(|c| c.is_finite()) {
            return Err(CameraError::DegenerateInput);
        }
        let r_xy = point.x.hypot(point.y);
        let theta = r_xy.atan2(point.z);
        if theta >= std::f64::consts::FRAC_PI_2 {
            return Err(CameraError::OffAxis);
        }
        if r_xy == 0.0 {
            return Ok(Vector2::new(self.cx, self.cy));
        }
        let theta_d = self.distort_angle(theta);
        let scale = theta_d / r_xy;
        Ok(Vector2::new(
            self.fx * scale * point.x + self.cx,
            self.fy * scale * point.y + self.cy,
        ))
    }

    /// Unprojects a pixel to a unit ray direction in the camera frame.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        let mx = (pixel.x - self.cx) / self.fx;
        let my = (pixel.y - self.cy) / self.fy;
        let theta_d = mx.hypot(my);
        if theta_d < 1e-14 {
            return Ok(Vector3::new(0.0, 0.0, 1.0));
        }
        let theta = self
            .undistort_angle(theta_d)
            .ok_or(CameraError::Unconverged {
                u: pixel.x,
                v: pixel.y,
            })?;
        let s = theta.sin() / theta_d;
        Ok(Vector3::new(s * mx, s * my, theta.cos()).normalize())
    }
}

/// Ideal pinhole intrinsics, used as the undistortion target.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if !(point.norm() > 0.0) || !point.iter().all(|c| c.is_finite()) {
            return Err(CameraError::DegenerateInput);
        }
        if point.z <= 0.0 {
            return Err(CameraError::OffAxis);
        }
        Ok(Vector2::new(
            self.fx * point.x / point.z + self.cx,
            self.fy * point.y / point.z + self.cy,
        ))
    }

    pub fn unproject(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }
}

/// A camera model that can map rays to pixels and back. Both the fisheye and
/// the pinhole target implement it so resampling code is written once.
pub trait Projection {
    fn project_ray(&self, ray: &Vector3<f64>) -> Result<Vector2<f64>, CameraError>;
    fn unproject_pixel(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError>;
    fn image_size(&self) -> (usize, usize);
}

impl Projection for CameraIntrinsics {
    fn project_ray(&self, ray: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        self.project(ray)
    }
    fn unproject_pixel(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        self.unproject(pixel)
    }
    fn image_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Projection for PinholeIntrinsics {
    fn project_ray(&self, ray: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        self.project(ray)
    }
    fn unproject_pixel(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        Ok(self.unproject(pixel))
    }
    fn image_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Precomputed per-pixel unit rays (through pixel centers) with a validity
/// mask for pixels whose unprojection failed.
#[derive(Debug, Clone)]
pub struct RayGrid {
    pub rays: Grid<Vector3<f64>>,
    pub valid: Mask,
}

impl RayGrid {
    pub fn from_projection(proj: &(impl Projection + Sync)) -> Self {
        let (width, height) = proj.image_size();
        let rows: Vec<Vec<(Vector3<f64>, bool)>> = (0..height)
            .into_par_iter()
            .map(|y| {
                (0..width)
                    .map(|x| {
                        match proj.unproject_pixel(&Vector2::new(x as f64, y as f64)) {
                            Ok(ray) => (ray, true),
                            Err(_) => (Vector3::new(0.0, 0.0, 1.0), false),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut rays = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for row in rows {
            for (ray, ok) in row {
                rays.push(ray);
                valid.push(ok);
            }
        }
        Self {
            rays: Grid::from_vec(width, height, rays),
            valid: Grid::from_vec(width, height, valid),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.rays.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.rays.height()
    }
}

/// Bilinear sample at a fractional position; `None` outside the valid square.
/// Positions within one part in 1e6 of the border are snapped inside so that
/// exact-identity warps survive floating-point rounding.
pub(crate) fn bilinear_sample(img: &Image, u: f64, v: f64) -> Option<f64> {
    let (umax, vmax) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let snap = 1e-6;
    let u = if (-snap..0.0).contains(&u) {
        0.0
    } else if u > umax && u < umax + snap {
        umax
    } else {
        u
    };
    let v = if (-snap..0.0).contains(&v) {
        0.0
    } else if v > vmax && v < vmax + snap {
        vmax
    } else {
        v
    };
    if !(u >= 0.0 && v >= 0.0 && u <= umax && v <= vmax) {
        return None;
    }
    let x0 = (u.floor() as usize).min(img.width() - 1);
    let y0 = (v.floor() as usize).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fu = u - x0 as f64;
    let fv = v - y0 as f64;
    let top = img.get(x0, y0) * (1.0 - fu) + img.get(x1, y0) * fu;
    let bot = img.get(x0, y1) * (1.0 - fu) + img.get(x1, y1) * fu;
    Some(top * (1.0 - fv) + bot * fv)
}

/// Resamples `img` (taken with `source`) onto the `target` pinhole grid by
/// bilinear interpolation. Returns the resampled image and a mask marking
/// pixels whose source location fell outside the input.
pub fn undistort_image(
    img: &Image,
    source: &(impl Projection + Sync),
    target: &PinholeIntrinsics,
) -> Result<(Image, Mask), CameraError> {
    let (sw, sh) = source.image_size();
    if img.width() != sw || img.height() != sh {
        return Err(CameraError::DimensionMismatch {
            got_w: img.width(),
            got_h: img.height(),
            want_w: sw,
            want_h: sh,
        });
    }
    let rows: Vec<Vec<(f64, bool)>> = (0..target.height)
        .into_par_iter()
        .map(|y| {
            (0..target.width)
                .map(|x| {
                    let ray = target.unproject(&Vector2::new(x as f64, y as f64));
                    let sampled = source
                        .project_ray(&ray)
                        .ok()
                        .and_then(|p| bilinear_sample(img, p.x, p.y));
                    match sampled {
                        Some(v) => (v, true),
                        None => (0.0, false),
                    }
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(target.width * target.height);
    let mut valid = Vec::with_capacity(target.width * target.height);
    for row in rows {
        for (v, ok) in row {
            out.push(v);
            valid.push(ok);
        }
    }
    Ok((
        Grid::from_vec(target.width, target.height, out),
        Grid::from_vec(target.width, target.height, valid),
    ))
}

/// Largest axis-aligned rectangle (x0, y0, w, h) containing only valid
/// pixels, found by shrinking from the full frame. Used as the default crop
/// window after undistortion.
pub fn largest_valid_rect(mask: &Mask) -> (usize, usize, usize, usize) {
    let (w, h) = (mask.width(), mask.height());
    let mut x0 = 0usize;
    let mut y0 = 0usize;
    let mut x1 = w;
    let mut y1 = h;
    let row_ok = |y: usize, x0: usize, x1: usize| (x0..x1).all(|x| *mask.get(x, y));
    let col_ok = |x: usize, y0: usize, y1: usize| (y0..y1).all(|y| *mask.get(x, y));
    while x0 < x1 && y0 < y1 {
        if row_ok(y0, x0, x1) && row_ok(y1 - 1, x0, x1) && col_ok(x0, y0, y1) && col_ok(x1 - 1, y0, y1)
        {
            break;
        }
        // Shrink the side with the most invalid pixels.
        let count_row = |y: usize| (x0..x1).filter(|&x| !*mask.get(x, y)).count();
        let count_col = |x: usize| (y0..y1).filter(|&y| !*mask.get(x, y)).count();
        let (top, bottom, left, right) = (
            count_row(y0),
            count_row(y1 - 1),
            count_col(x0),
            count_col(x1 - 1),
        );
        let worst = top.max(bottom).max(left).max(right);
        if worst == top {
            y0 += 1;
        } else if worst == bottom {
            y1 -= 1;
        } else if worst == left {
            x0 += 1;
        } else {
            x1 -= 1;
        }
    }
    (x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
}

/// Crops a grid to a rectangle.
pub fn crop<T: Clone>(grid: &Grid<T>, rect: (usize, usize, usize, usize)) -> Grid<T> {
    let (x0, y0, w, h) = rect;
    Grid::from_fn(w, h, |x, y| grid.get(x0 + x, y0 + y).clone())
}

/// Reference fixture intrinsics for a 1440x1080 endoscope camera.
pub fn reference_fixture() -> CameraIntrinsics {
    CameraIntrinsics::new(
        717.21,
        717.48,
        735.37,
        552.80,
        [-0.13893, -1.2396e-3, 9.1258e-4, -4.0716e-5],
        1440,
        1080,
    )
    .expect("fixture intrinsics are valid")
}
