//! Synthetic depth observations and the visible / occluded point sets used
//! for shape completion.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::BOX_HALF;

use super::points::{truncated_sdf, uniform_point};
use super::{PointBatch, PointRole, Shape, Vec3};

/// Points within this distance behind the recorded depth still count as observed.
pub const VISIBILITY_TOLERANCE: f64 = 0.04;

/// Fraction of visible samples placed in observed free space.
pub const FREE_SPACE_FRACTION: f64 = 0.5;

const HIT_EPS: f64 = 1e-5;
const MAX_TRACE_STEPS: usize = 1024;

/// Pinhole camera description: position, look-at target and field of view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    #[serde(default)]
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

fn default_fov() -> f64 {
    60.0
}

/// Pinhole camera with `+z` forward, `x` right and `y` down in camera space.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub spec: CameraSpec,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation.
    pub rotation: Rotation3<f64>,
    pub position: Vec3,
}

impl Camera {
    pub fn new(spec: CameraSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 {
            return Err(Error::Argument("camera image must be non-empty".into()));
        }
        if !(spec.fov_y_deg > 0.0 && spec.fov_y_deg < 180.0) {
            return Err(Error::Argument(format!("field of view {} out of range", spec.fov_y_deg)));
        }
        let eye = Vec3::from(spec.eye);
        if eye.iter().all(|c| c.abs() <= BOX_HALF) {
            return Err(Error::Argument("camera must sit outside the world box".into()));
        }
        let forward = (Vec3::from(spec.target) - eye).normalize();
        let right = forward.cross(&Vec3::from(spec.up));
        if right.norm() < 1e-9 {
            return Err(Error::Argument("camera up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[right, down, forward]));
        let fy = 0.5 * spec.height as f64 / (0.5 * spec.fov_y_deg.to_radians()).tan();
        Ok(Self {
            fx: fy,
            fy,
            cx: 0.5 * spec.width as f64,
            cy: 0.5 * spec.height as f64,
            rotation,
            position: eye,
            spec,
        })
    }

    /// Camera on a sphere of `radius` around the origin at the given angles.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_y_deg: f64, size: usize) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos()];
        Self::new(CameraSpec {
            eye,
            target: [0.0; 3],
            up: default_up(),
            fov_y_deg,
            width: size,
            height: size,
        })
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    /// Unit world-space direction through the centre of pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> Vec3 {
        let d = Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        (self.rotation * d).normalize()
    }

    /// Pixel containing the projection of `p` and its distance from the eye,
    /// or `None` when `p` is behind the camera or outside the image.
    pub fn project(&self, p: &Vec3) -> Option<((usize, usize), f64)> {
        let rel = p - self.position;
        let q = self.rotation.inverse() * rel;
        if q.z <= 0.0 {
            return None;
        }
        let u = self.fx * q.x / q.z + self.cx;
        let v = self.fy * q.y / q.z + self.cy;
        if u < 0.0 || v < 0.0 || u >= self.width() as f64 || v >= self.height() as f64 {
            return None;
        }
        Some(((u as usize, v as usize), rel.norm()))
    }
}

/// Entry and exit ray parameters of the world box, if hit.
fn box_interval(origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > BOX_HALF {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((-BOX_HALF - origin[a]) * inv, (BOX_HALF - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Sphere-traces the first surface hit along a ray inside the world box.
pub fn trace_ray(shape: &Shape, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let (t_in, t_out) = box_interval(origin, dir)?;
    let mut t = t_in;
    for _ in 0..MAX_TRACE_STEPS {
        let d = shape.eval(&(origin + dir * t));
        if d < HIT_EPS {
            return Some(t);
        }
        t += d;
        if t > t_out {
            return None;
        }
    }
    None
}

/// A depth image: per-pixel ray distance to the first hit, 0 where the ray
/// misses. Stored row-major, `depth[v * width + u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthObservation {
    pub camera: Camera,
    pub depth: Vec<f32>,
}

/// Classification of a world point against a depth image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Visibility {
    /// In front of, or within tolerance behind, the observed surface.
    Visible,
    /// On a pixel whose ray hit nothing.
    Empty,
    /// Behind the observed surface, or outside the image.
    Occluded,
}

impl DepthObservation {
    pub fn depth_at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.camera.width() + u]
    }

    pub fn valid_pixels(&self) -> Vec<(usize, usize)> {
        let w = self.camera.width();
        self.depth
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(i, _)| (i % w, i / w))
            .collect()
    }

    /// World position of the hit recorded at pixel `(u, v)`.
    pub fn back_project(&self, u: usize, v: usize) -> Option<Vec3> {
        let d = self.depth_at(u, v);
        (d > 0.0).then(|| self.camera.position + self.camera.ray(u, v) * d as f64)
    }

    pub fn hit_points(&self) -> Vec<[f64; 3]> {
        self.valid_pixels()
            .into_iter()
            .filter_map(|(u, v)| self.back_project(u, v))
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    pub fn classify(&self, p: &Vec3) -> Visibility {
        match self.camera.project(p) {
            None => Visibility::Occluded,
            Some(((u, v), dist)) => {
                let d = self.depth_at(u, v) as f64;
                if d <= 0.0 {
                    Visibility::Empty
                } else if dist > d + VISIBILITY_TOLERANCE {
                    Visibility::Occluded
                } else {
                    Visibility::Visible
                }
            }
        }
    }
}

/// Renders the first-hit ray distance for every pixel.
pub fn render_depth(shape: &Shape, camera: &Camera) -> DepthObservation {
    let (w, h) = (camera.width(), camera.height());
    let depth = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let dir = camera.ray(i % w, i / w);
            trace_ray(shape, &camera.position, &dir).map_or(0.0, |t| t as f32)
        })
        .collect();
    DepthObservation {
        camera: camera.clone(),
        depth,
    }
}

fn inside_box(p: &[f32; 3]) -> bool {
    p.iter().all(|c| (c.abs() as f64) <= BOX_HALF)
}

/// Camera-observable points `P_V` (near-surface jitter along pixel rays plus
/// free-space samples in front of hits or along rays that hit nothing) and
/// occluded points `P_O` (uniform box samples hidden behind the depth surface
/// or outside the image), both labelled with ground truth from `shape`.
pub fn completion_point_sets(
    depth: &DepthObservation,
    shape: &Shape,
    n_vis: usize,
    n_occ: usize,
    seed: u64,
) -> Result<(PointBatch, PointBatch)> {
    let pixels = depth.valid_pixels();
    if pixels.is_empty() {
        return Err(Error::Observation("depth image has no valid pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = &depth.camera;
    // Keep jittered samples strictly inside the tolerance after f32 rounding.
    let jitter = VISIBILITY_TOLERANCE * 0.999;
    let mut visible = Vec::with_capacity(n_vis);
    let mut attempts = 0u64;
    while visible.len() < n_vis {
        attempts += 1;
        if attempts > super::points::MAX_REJECTIONS {
            return Err(Error::Observation("could not place visible samples in the box".into()));
        }
        let p = if rng.random_bool(FREE_SPACE_FRACTION) {
            // Any pixel: space in front of a hit, or the whole ray through
            // the box when nothing was hit, is observed to be empty.
            let (u, v) = (rng.random_range(0..cam.width()), rng.random_range(0..cam.height()));
            let dir = cam.ray(u, v);
            let Some((t_in, t_out)) = box_interval(&cam.position, &dir) else { continue };
            let hit = depth.depth_at(u, v) as f64;
            let far = if hit > 0.0 { hit - VISIBILITY_TOLERANCE } else { t_out };
            if far <= t_in {
                continue;
            }
            cam.position + dir * rng.random_range(t_in..far)
        } else {
            let (u, v) = pixels[rng.random_range(0..pixels.len())];
            let hit = depth.depth_at(u, v) as f64;
            cam.position + cam.ray(u, v) * (hit + rng.random_range(-jitter..jitter))
        };
        let pf = [p.x as f32, p.y as f32, p.z as f32];
        let class = depth.classify(&Vec3::from(pf.map(f64::from)));
        if inside_box(&pf) && matches!(class, Visibility::Visible | Visibility::Empty) {
            visible.push(pf);
        }
    }
    let mut occluded = Vec::with_capacity(n_occ);
    let mut attempts = 0u64;
    while occluded.len() < n_occ {
        attempts += 1;
        if attempts > super::points::MAX_REJECTIONS {
            return Err(Error::Observation("observation leaves no occluded region".into()));
        }
        let p = uniform_point(&mut rng);
        if depth.classify(&Vec3::from(p.map(f64::from))) == Visibility::Occluded {
            occluded.push(p);
        }
    }
    Ok((
        PointBatch::labelled(PointRole::Visible, shape, visible),
        PointBatch::labelled(PointRole::Occluded, shape, occluded),
    ))
}

/// Truncated ground truth at a single position (shared with evaluation code).
pub fn ground_truth(shape: &Shape, p: [f32; 3]) -> f32 {
    truncated_sdf(shape, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera(size: usize) -> Camera {
        Camera::new(CameraSpec {
            eye: [0.0, 0.0, 1.0],
            target: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_y_deg: 60.0,
            width: size,
            height: size,
        })
        .unwrap()
    }

    #[test]
    fn central_ray_hits_sphere_front() {
        // Odd size so a pixel centre lies on the optical axis.
        let cam = front_camera(33);
        let obs = render_depth(&Shape::sphere(0.3), &cam);
        assert!((obs.depth_at(16, 16) as f64 - 0.7).abs() < 1e-3);
    }

    #[test]
    fn missing_rays_record_zero() {
        let cam = front_camera(33);
        let obs = render_depth(&Shape::sphere(0.1), &cam);
        assert_eq!(obs.depth_at(0, 0), 0.0);
    }

    #[test]
    fn back_projected_hits_lie_on_surface() {
        let shape = Shape::sphere_union_box();
        let obs = render_depth(&shape, &Camera::orbit(30.0, 20.0, 1.6, 50.0, 48).unwrap());
        let hits = obs.hit_points();
        assert!(hits.len() > 100);
        for p in hits {
            assert!(shape.eval_at(p).abs() < 1e-3);
        }
    }

    #[test]
    fn projection_inverts_pixel_rays() {
        let cam = Camera::orbit(70.0, -10.0, 1.5, 45.0, 40).unwrap();
        for (u, v) in [(0, 0), (13, 27), (39, 39)] {
            let p = cam.position + cam.ray(u, v) * 1.2;
            let ((pu, pv), d) = cam.project(&p).unwrap();
            assert_eq!((pu, pv), (u, v));
            assert!((d - 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn point_sets_respect_visibility() {
        let shape = Shape::sphere(0.3);
        let obs = render_depth(&shape, &front_camera(41));
        let (vis, occ) = completion_point_sets(&obs, &shape, 2048, 1024, 3).unwrap();
        assert_eq!((vis.len(), occ.len()), (2048, 1024));
        vis.validate().unwrap();
        occ.validate().unwrap();
        let mut empty = 0;
        for i in 0..vis.len() {
            let p = Vec3::from(vis.position(i));
            let ((u, v), dist) = obs.camera.project(&p).unwrap();
            match obs.classify(&p) {
                Visibility::Visible => assert!(dist <= obs.depth_at(u, v) as f64 + VISIBILITY_TOLERANCE),
                Visibility::Empty => {
                    assert!(vis.gt_sdf[i] > 0.0);
                    empty += 1;
                }
                Visibility::Occluded => panic!("occluded sample in the visible set"),
            }
        }
        // Rays that miss the sphere still observe free space.
        assert!(empty > 0);
        for i in 0..occ.len() {
            assert_eq!(obs.classify(&Vec3::from(occ.position(i))), Visibility::Occluded);
        }
    }

    #[test]
    fn far_side_of_sphere_is_occluded() {
        // Analytic visibility: along the optical axis the front surface is at
        // distance 0.7 from the eye, so anything deeper than 0.74 is hidden.
        let obs = render_depth(&Shape::sphere(0.3), &front_camera(41));
        for z in [-0.05, -0.2, -0.29, -0.5] {
            assert_eq!(obs.classify(&Vec3::new(0.0, 0.0, z)), Visibility::Occluded);
        }
        for z in [0.3, 0.27, 0.5] {
            assert_eq!(obs.classify(&Vec3::new(0.0, 0.0, z)), Visibility::Visible);
        }
    }

    #[test]
    fn empty_image_is_observation_error() {
        let shape = Shape::sphere(0.05).translated([0.5, 0.5, -0.5]);
        let cam = Camera::new(CameraSpec {
            eye: [0.0, 0.0, 1.0],
            target: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_y_deg: 5.0,
            width: 8,
            height: 8,
        })
        .unwrap();
        let obs = render_depth(&shape, &cam);
        assert!(matches!(completion_point_sets(&obs, &shape, 10, 10, 0), Err(Error::Observation(_))));
    }
}
