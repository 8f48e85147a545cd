//! Synthetic scene generation and forward rendering.
//!
//! Scenes are analytic surfaces (no meshes), so ray casting yields exact
//! ground-truth depth and normals. The renderer and the photometric model
//! share one evaluation path: a rendered pixel is exactly
//! `predict_intensity` at the ray-cast hit, optionally plus per-pixel
//! Gaussian noise drawn from a counter-based stream keyed on (seed, pixel),
//! which makes renders reproducible regardless of the parallel schedule.

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, RayGrid};
use crate::grid::{Grid, Image, Mask};
use crate::photometry::{Brdf, PhotometricModel, GRAY_LEVELS};

/// Analytic surface variants. All are expressed in the camera frame with the
/// camera at the origin looking along +z.
#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// Plane through `(0, 0, distance)` whose camera-facing normal is
    /// `(0, 0, -1)` rotated by `tilt_x` about the x-axis then `tilt_y`
    /// about the y-axis (radians).
    RotatedPlane {
        distance: f64,
        tilt_x: f64,
        tilt_y: f64,
    },
    /// Height field `z = base + amplitude * sin(2*pi*x / period)`.
    CurvedSheet {
        base: f64,
        amplitude: f64,
        period: f64,
    },
    /// Cylinder of the given radius around an axis through `axis_point`
    /// with direction `axis_dir`, visible for axial coordinate in
    /// `[0, length]`. `haustra_amp` modulates the radius along the axis
    /// (relative amplitude) with the given period, mimicking colon folds.
    Tube {
        radius: f64,
        axis_point: Vector3<f64>,
        axis_dir: Vector3<f64>,
        length: f64,
        haustra_amp: f64,
        haustra_period: f64,
    },
    /// Two frontal planes meeting at the `x = 0` plane: `z = z_near` for
    /// x > 0, `z = z_far` for x <= 0. The riser is exactly self-occluded
    /// for a camera at the origin, leaving a clean depth discontinuity.
    Step { z_near: f64, z_far: f64 },
}

impl Surface {
    /// Signed implicit function; zero on the surface. Used by tests to
    /// verify ray-cast hits independently.
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Surface::RotatedPlane {
                distance,
                tilt_x,
                tilt_y,
            } => {
                let n = plane_normal(*tilt_x, *tilt_y);
                n.dot(&(p - Vector3::new(0.0, 0.0, *distance)))
            }
            Surface::CurvedSheet {
                base,
                amplitude,
                period,
            } => p.z - base - amplitude * (std::f64::consts::TAU * p.x / period).sin(),
            Surface::Tube {
                radius,
                axis_point,
                axis_dir,
                length: _,
                haustra_amp,
                haustra_period,
            } => {
                let axis = axis_dir.normalize();
                let rel = p - axis_point;
                let s = rel.dot(&axis);
                let rho = (rel - s * axis).norm();
                rho - tube_radius_at(*radius, *haustra_amp, *haustra_period, s)
            }
            Surface::Step { z_near, z_far } => {
                if p.x > 0.0 {
                    p.z - z_near
                } else {
                    p.z - z_far
                }
            }
        }
    }

    /// Closest positive intersection of a unit ray from the origin with the
    /// surface: Euclidean distance and camera-facing unit normal.
    pub fn ray_cast(&self, ray: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Surface::RotatedPlane {
                distance,
                tilt_x,
                tilt_y,
            } => {
                let n = plane_normal(*tilt_x, *tilt_y);
                let denom = n.dot(ray);
                // The camera-facing normal must oppose the ray.
                if denom >= -1e-12 {
                    return None;
                }
                let t = n.dot(&Vector3::new(0.0, 0.0, *distance)) / denom;
                if t <= 0.0 {
                    return None;
                }
                Some((t, n))
            }
            Surface::CurvedSheet {
                base,
                amplitude,
                period,
            } => {
                if ray.z <= 1e-9 {
                    return None;
                }
                let f = |t: f64| {
                    t * ray.z - base - amplitude * (std::f64::consts::TAU * t * ray.x / period).sin()
                };
                // Bracket around the unperturbed plane hit and bisect; the
                // scene configurations keep f monotone along visible rays.
                let mut lo = ((base - 1.5 * amplitude.abs()) / ray.z).max(0.0);
                let mut hi = (base + 1.5 * amplitude.abs()) / ray.z + 1e-6;
                let mut expand = 0;
                while f(hi) < 0.0 {
                    hi *= 1.5;
                    expand += 1;
                    if expand > 60 {
                        return None;
                    }
                }
                while f(lo) > 0.0 {
                    lo *= 0.5;
                    if lo < 1e-9 {
                        return None;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo < 1e-14 {
                        break;
                    }
                }
                let t = 0.5 * (lo + hi);
                let slope =
                    amplitude * std::f64::consts::TAU / period
                        * (std::f64::consts::TAU * t * ray.x / period).cos();
                // Gradient of z - base - A*sin(2 pi x / P), flipped toward the camera.
                let n = Vector3::new(slope, 0.0, -1.0).normalize();
                Some((t, n))
            }
            Surface::Tube {
                radius,
                axis_point,
                axis_dir,
                length,
                haustra_amp,
                haustra_period,
            } => {
                let axis = axis_dir.normalize();
                // Quadratic intersection with the unmodulated cylinder.
                let u = ray - ray.dot(&axis) * axis;
                let w = -axis_point + axis_point.dot(&axis) * axis;
                let a = u.norm_squared();
                if a < 1e-16 {
                    return None;
                }
                let b = 2.0 * u.dot(&w);
                let c = w.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let mut t = (-b + disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                if *haustra_amp != 0.0 {
                    // Polish on the modulated radius with bisection around
                    // the cylinder hit; the modulation is small.
                    let g = |t: f64| {
                        let rel = t * ray - axis_point;
                        let s = rel.dot(&axis);
                        let rho = (rel - s * axis).norm();
                        rho - tube_radius_at(*radius, *haustra_amp, *haustra_period, s)
                    };
                    let span = radius * haustra_amp.abs() * 4.0 + 1e-6;
                    let mut lo = (t - span / a.sqrt().max(0.2)).max(t * 0.3);
                    let mut hi = t + span / a.sqrt().max(0.2);
                    let mut k = 0;
                    while g(lo) > 0.0 {
                        lo *= 0.8;
                        k += 1;
                        if k > 80 {
                            return None;
                        }
                    }
                    k = 0;
                    while g(hi) < 0.0 {
                        hi *= 1.2;
                        k += 1;
                        if k > 80 {
                            return None;
                        }
                    }
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if g(mid) < 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                        if hi - lo < 1e-14 {
                            break;
                        }
                    }
                    t = 0.5 * (lo + hi);
                }
                let rel = t * ray - axis_point;
                let s = rel.dot(&axis);
                if !(0.0..=*length).contains(&s) {
                    return None;
                }
                let rho_vec = rel - s * axis;
                let rho = rho_vec.norm();
                if rho < 1e-12 {
                    return None;
                }
                let dr_ds = if *haustra_amp != 0.0 {
                    radius * haustra_amp * std::f64::consts::TAU / haustra_period
                        * (std::f64::consts::TAU * s / haustra_period).cos()
                } else {
                    0.0
                };
                // Inward-pointing normal of rho - R(s).
                let n = (-(rho_vec / rho) + dr_ds * axis).normalize();
                Some((t, n))
            }
            Surface::Step { z_near, z_far } => {
                if ray.z <= 1e-9 {
                    return None;
                }
                let t_near = z_near / ray.z;
                if t_near * ray.x > 0.0 {
                    Some((t_near, Vector3::new(0.0, 0.0, -1.0)))
                } else {
                    Some((z_far / ray.z, Vector3::new(0.0, 0.0, -1.0)))
                }
            }
        }
    }
}

fn plane_normal(tilt_x: f64, tilt_y: f64) -> Vector3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), tilt_y)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), tilt_x)
        * Vector3::new(0.0, 0.0, -1.0)
}

fn tube_radius_at(radius: f64, amp: f64, period: f64, s: f64) -> f64 {
    radius * (1.0 + amp * (std::f64::consts::TAU * s / period).sin())
}

/// An analytic ground-truth scene: a surface with constant diffuse albedo.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub surface: Surface,
    pub albedo: f64,
}

impl Scene {
    /// Photometric model matching this scene's reflectance, for rendering.
    pub fn model(&self, k: f64, gamma: f64, gains: Vec<f64>) -> PhotometricModel {
        PhotometricModel::new(
            k,
            gamma,
            gains,
            Brdf::lambertian(self.albedo).expect("scene albedo is positive"),
        )
        .expect("scene model parameters are valid")
    }
}

/// A rendered frame with exact per-pixel ground truth.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: Image,
    pub gt_depth_euclidean: Grid<f64>,
    pub gt_depth_z: Grid<f64>,
    pub gt_normals: Grid<Vector3<f64>>,
    pub valid: Mask,
}

/// Gaussian sample from a counter-based stream keyed by (seed, counter).
fn counter_gaussian(seed: u64, counter: u64) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&counter.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.sample(StandardNormal)
}

/// Renders a scene through the fisheye camera with the given photometric
/// model at frame `t`. `noise_sigma` is additive Gaussian noise in gray
/// levels; the stored image is clamped to `[0, 1]`.
pub fn render(
    scene: &Scene,
    intr: &CameraIntrinsics,
    model: &PhotometricModel,
    t: usize,
    noise_sigma: f64,
    seed: u64,
) -> RenderedFrame {
    let rays = RayGrid::from_projection(intr);
    render_with_rays(scene, &rays, model, t, noise_sigma, seed)
}

/// Same as [`render`] but reusing precomputed rays.
pub fn render_with_rays(
    scene: &Scene,
    rays: &RayGrid,
    model: &PhotometricModel,
    t: usize,
    noise_sigma: f64,
    seed: u64,
) -> RenderedFrame {
    let (w, h) = (rays.width(), rays.height());
    struct PixelOut {
        image: f64,
        d: f64,
        z: f64,
        n: Vector3<f64>,
        valid: bool,
    }
    let rows: Vec<Vec<PixelOut>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let invalid = PixelOut {
                        image: 0.0,
                        d: 0.0,
                        z: 0.0,
                        n: Vector3::zeros(),
                        valid: false,
                    };
                    if !*rays.valid.get(x, y) {
                        return invalid;
                    }
                    let ray = rays.rays.get(x, y);
                    let Some((d, n)) = scene.surface.ray_cast(ray) else {
                        return invalid;
                    };
                    let point = d * ray;
                    let Ok(intensity) = model.predict_intensity(&point, &n, t) else {
                        return invalid;
                    };
                    let noisy = if noise_sigma > 0.0 {
                        let idx = (y * w + x) as u64;
                        intensity + noise_sigma / GRAY_LEVELS * counter_gaussian(seed, idx)
                    } else {
                        intensity
                    };
                    PixelOut {
                        image: noisy.clamp(0.0, 1.0),
                        d,
                        z: point.z,
                        n,
                        valid: true,
                    }
                })
                .collect()
        })
        .collect();

    let mut image = Vec::with_capacity(w * h);
    let mut gd = Vec::with_capacity(w * h);
    let mut gz = Vec::with_capacity(w * h);
    let mut gn = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for row in rows {
        for p in row {
            image.push(p.image);
            gd.push(p.d);
            gz.push(p.z);
            gn.push(p.n);
            valid.push(p.valid);
        }
    }
    RenderedFrame {
        image: Grid::from_vec(w, h, image),
        gt_depth_euclidean: Grid::from_vec(w, h, gd),
        gt_depth_z: Grid::from_vec(w, h, gz),
        gt_normals: Grid::from_vec(w, h, gn),
        valid: Grid::from_vec(w, h, valid),
    }
}

/// A planar calibration patch modeled by its white-region sample points.
/// Points live on the pattern plane `z = 0` (pattern frame, meters) and the
/// pattern normal is `+z` in that frame.
#[derive(Debug, Clone)]
pub struct CalibrationPattern {
    pub points: Vec<Vector2<f64>>,
    pub brdf: Brdf,
}

impl CalibrationPattern {
    /// Uniform grid of sample points over a `width x height` patch centered
    /// at the pattern origin.
    pub fn grid(width: f64, height: f64, nx: usize, ny: usize, brdf: Brdf) -> Self {
        let mut points = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let fx = (i as f64 + 0.5) / nx as f64 - 0.5;
                let fy = (j as f64 + 0.5) / ny as f64 - 0.5;
                points.push(Vector2::new(fx * width, fy * height));
            }
        }
        Self { points, brdf }
    }
}

/// One frame of a rendered calibration sequence.
#[derive(Debug, Clone)]
pub struct CalibrationFrame {
    /// Frame index into the model's gain sequence.
    pub t: usize,
    /// Visible samples: (point id, observed intensity, point in the
    /// camera-at-t frame).
    pub samples: Vec<(usize, f64, Vector3<f64>)>,
}

#[derive(Debug, Clone)]
pub struct CalibrationSequence {
    pub frames: Vec<CalibrationFrame>,
    /// Frames dropped because the pattern was fully out of view.
    pub dropped: Vec<usize>,
}

/// Simulates the photometric observations of a calibration video: for each
/// pose, every visible sample point yields an intensity from the model
/// (with the pattern's own BRDF) at that frame's gain. `noise_sigma` is in
/// gray levels. Poses map pattern coordinates into the camera frame.
pub fn render_calibration_sequence(
    pattern: &CalibrationPattern,
    trajectory: &[Isometry3<f64>],
    intr: &CameraIntrinsics,
    model: &PhotometricModel,
    noise_sigma: f64,
    seed: u64,
) -> CalibrationSequence {
    let mut eval_model = model.clone();
    eval_model.brdf = pattern.brdf.clone();
    let mut frames = Vec::new();
    let mut dropped = Vec::new();
    for (t, pose) in trajectory.iter().enumerate() {
        let normal = pose.rotation * Vector3::new(0.0, 0.0, 1.0);
        let mut samples = Vec::new();
        for (j, p) in pattern.points.iter().enumerate() {
            let x_cam = pose * nalgebra::Point3::new(p.x, p.y, 0.0);
            let x = x_cam.coords;
            if x.z <= 0.0 {
                continue;
            }
            // Visible: inside the image and front-facing.
            let Ok(pix) = intr.project(&x) else { continue };
            if pix.x < 0.0
                || pix.y < 0.0
                || pix.x > (intr.width - 1) as f64
                || pix.y > (intr.height - 1) as f64
            {
                continue;
            }
            let to_camera = -x.normalize();
            if to_camera.dot(&normal) <= 0.0 {
                continue;
            }
            let Ok(intensity) = eval_model.predict_intensity(&x, &normal, t) else {
                continue;
            };
            let noisy = if noise_sigma > 0.0 {
                let counter = (t as u64) << 32 | j as u64;
                intensity + noise_sigma / GRAY_LEVELS * counter_gaussian(seed, counter)
            } else {
                intensity
            };
            samples.push((j, noisy.clamp(0.0, 1.0), x));
        }
        if samples.is_empty() {
            dropped.push(t);
        } else {
            frames.push(CalibrationFrame { t, samples });
        }
    }
    CalibrationSequence { frames, dropped }
}

/// A fronto-parallel trajectory: the camera sits on the pattern normal at
/// `distance(t)`, tilted by `tilt_x(t)`/`tilt_y(t)` radians. Poses map
/// pattern coordinates to camera coordinates.
pub fn make_trajectory(
    n_frames: usize,
    distance: impl Fn(usize) -> f64,
    tilt_x: impl Fn(usize) -> f64,
    tilt_y: impl Fn(usize) -> f64,
) -> Vec<Isometry3<f64>> {
    (0..n_frames)
        .map(|t| {
            let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
            let tilt = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), tilt_x(t))
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), tilt_y(t));
            Isometry3::from_parts(
                Translation3::new(0.0, 0.0, distance(t)),
                tilt * flip,
            )
        })
        .collect()
}
