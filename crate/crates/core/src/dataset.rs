//! Posed training data: a self-contained procedural sphere scene plus a
//! loader for the synthetic-blender dataset layout (transforms_train.json
//! next to image files).

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::img::{Image, ImageError};
use crate::render::{
    rays_from_pose, render_image, FieldEval, JitterPolicy, Ray, RenderError, RenderOptions,
    ViewKey,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("transforms_train.json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// One training view: pixels plus the camera that saw them.
#[derive(Clone, Debug)]
pub struct PosedImage {
    pub image: Image,
    pub camera_to_world: Matrix4<f64>,
    pub focal_px: f64,
}

impl PosedImage {
    /// Validates the pose (orthonormal rotation, homogeneous last row) and
    /// clamps pixels into [0,1].
    pub fn new(
        mut image: Image,
        camera_to_world: Matrix4<f64>,
        focal_px: f64,
    ) -> Result<Self, DatasetError> {
        let r = camera_to_world.fixed_view::<3, 3>(0, 0);
        let gram = r.transpose() * r;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - want).abs() > 1e-4 {
                    return Err(DatasetError::Format(format!(
                        "camera_to_world rotation not orthonormal (gram[{i}][{j}] = {})",
                        gram[(i, j)]
                    )));
                }
            }
        }
        for (j, want) in [0.0, 0.0, 0.0, 1.0].into_iter().enumerate() {
            if (camera_to_world[(3, j)] - want).abs() > 1e-6 {
                return Err(DatasetError::Format(
                    "camera_to_world last row is not (0,0,0,1)".into(),
                ));
            }
        }
        if !(focal_px.is_finite() && focal_px > 0.0) {
            return Err(DatasetError::Format(format!("focal {focal_px} not positive")));
        }
        for v in image.channel_major_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            image,
            camera_to_world,
            focal_px,
        })
    }

    pub fn rays(&self, near: f64, far: f64) -> Vec<Ray> {
        rays_from_pose(
            &self.camera_to_world,
            self.image.width(),
            self.image.height(),
            self.focal_px,
            near,
            far,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub rgb: [f64; 3],
    pub density: f64,
}

/// Analytic stand-in scene: hard spheres with constant density and color on
/// a constant background.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub spheres: Vec<Sphere>,
    pub background: [f64; 3],
}

/// Everything the procedural scene may occupy.
pub const SCENE_BOUND: f64 = 1.5;

impl SceneSpec {
    /// Three opaque spheres on white: enough occlusion to make viewpoint
    /// matter, no external data.
    pub fn three_spheres() -> Self {
        let s = |center: [f64; 3], radius: f64, rgb: [f64; 3]| Sphere {
            center,
            radius,
            rgb,
            density: 40.0,
        };
        SceneSpec {
            spheres: vec![
                s([0.0, 0.0, 0.0], 0.5, [0.9, 0.2, 0.2]),
                s([0.6, 0.1, 0.3], 0.3, [0.2, 0.9, 0.2]),
                s([-0.5, -0.2, 0.4], 0.25, [0.2, 0.3, 0.9]),
            ],
            background: [1.0, 1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius.is_finite() && s.radius > 0.0) {
                return Err(DatasetError::Format(format!(
                    "sphere {i}: radius {} not positive",
                    s.radius
                )));
            }
            if !(s.density.is_finite() && s.density >= 0.0) {
                return Err(DatasetError::Format(format!(
                    "sphere {i}: density {} negative",
                    s.density
                )));
            }
            for c in 0..3 {
                if s.center[c].abs() + s.radius > SCENE_BOUND {
                    return Err(DatasetError::Format(format!(
                        "sphere {i} leaves the [-{SCENE_BOUND}, {SCENE_BOUND}] bounds"
                    )));
                }
                if !(0.0..=1.0).contains(&s.rgb[c]) {
                    return Err(DatasetError::Format(format!("sphere {i}: rgb outside [0,1]")));
                }
            }
        }
        if !self.background.iter().all(|b| (0.0..=1.0).contains(b)) {
            return Err(DatasetError::Format("background outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Color and density at a point: the first sphere whose closed ball contains
/// x wins, empty space is background with zero density.
pub fn procedural_field(spec: &SceneSpec, x: [f64; 3]) -> ([f64; 3], f64) {
    for s in &spec.spheres {
        let d2 = (0..3).map(|c| (x[c] - s.center[c]).powi(2)).sum::<f64>();
        if d2.sqrt() <= s.radius {
            return (s.rgb, s.density);
        }
    }
    (spec.background, 0.0)
}

impl FieldEval for SceneSpec {
    fn eval_batch(&self, positions: &[f64], _dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = positions.len() / 3;
        let mut rgb = Vec::with_capacity(3 * n);
        let mut sigma = Vec::with_capacity(n);
        for i in 0..n {
            let p = [positions[3 * i], positions[3 * i + 1], positions[3 * i + 2]];
            let (c, s) = procedural_field(self, p);
            rgb.extend_from_slice(&c);
            sigma.push(s);
        }
        (rgb, sigma)
    }
}

/// Samples per ray when rasterizing the analytic scene into training views.
pub const GROUND_TRUTH_SAMPLES: usize = 128;

/// Renders `n_views` posed images of the procedural scene from random orbit
/// cameras (azimuth anywhere, elevation in [-90, -10] degrees), using evenly
/// spaced depth samples so the output is seed-reproducible.
pub fn generate_training_views(
    spec: &SceneSpec,
    n_views: usize,
    height: usize,
    width: usize,
    radius: f64,
    focal_px: f64,
    seed: u64,
) -> Result<Vec<PosedImage>, DatasetError> {
    spec.validate()?;
    if n_views == 0 {
        return Err(DatasetError::Format("n_views must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RenderOptions {
        n_coarse: GROUND_TRUTH_SAMPLES,
        n_fine: 0,
        background: spec.background,
        jitter: JitterPolicy::Midpoint,
    };
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let theta = rng.random_range(-180.0..180.0);
        let phi = rng.random_range(-90.0..=-10.0);
        let key = ViewKey {
            theta_deg: theta,
            phi_deg: phi,
            radius,
            focal_px,
            width,
            height,
            near: 2.0,
            far: 6.0,
        };
        let image = render_image(spec, spec, &key, &opts)?;
        views.push(PosedImage::new(image, key.pose(), focal_px)?);
    }
    Ok(views)
}

#[derive(Deserialize, Serialize)]
struct TransformsFile {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Deserialize, Serialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

fn resolve_frame_image(dir: &Path, file_path: &str) -> Option<PathBuf> {
    let base = dir.join(file_path);
    if base.is_file() {
        return Some(base);
    }
    for ext in ["png", "ppm"] {
        let with_ext = base.with_extension(ext);
        if with_ext.is_file() {
            return Some(with_ext);
        }
    }
    None
}

/// Loads a synthetic-blender training split: `transforms_train.json` plus
/// the images its frames reference (frame paths may omit the extension).
/// Images are bilinearly downscaled by the integer `downscale` factor;
/// focal length is derived from `camera_angle_x` at the downscaled width.
pub fn load_nerf_synthetic(dir: &Path, downscale: usize) -> Result<Vec<PosedImage>, DatasetError> {
    if downscale == 0 {
        return Err(DatasetError::Format("downscale factor must be positive".into()));
    }
    let text = std::fs::read_to_string(dir.join("transforms_train.json"))?;
    let transforms: TransformsFile = serde_json::from_str(&text)?;
    if !(transforms.camera_angle_x.is_finite() && transforms.camera_angle_x > 0.0) {
        return Err(DatasetError::Format(format!(
            "camera_angle_x {} not positive",
            transforms.camera_angle_x
        )));
    }
    if transforms.frames.is_empty() {
        return Err(DatasetError::Format("frames is empty".into()));
    }
    let mut views = Vec::with_capacity(transforms.frames.len());
    for (i, frame) in transforms.frames.iter().enumerate() {
        let path = resolve_frame_image(dir, &frame.file_path).ok_or_else(|| {
            DatasetError::Format(format!(
                "frames[{i}].file_path: no image found for {}",
                frame.file_path
            ))
        })?;
        let mut image = Image::load(&path)?;
        if downscale > 1 {
            let (w, h) = (image.width() / downscale, image.height() / downscale);
            if w == 0 || h == 0 {
                return Err(DatasetError::Format(format!(
                    "frames[{i}]: downscale {downscale} collapses a {}x{} image",
                    image.width(),
                    image.height()
                )));
            }
            image = image.resize_bilinear(w, h);
        }
        let focal_px =
            0.5 * image.width() as f64 / (0.5 * transforms.camera_angle_x).tan();
        let m = &frame.transform_matrix;
        let pose = Matrix4::from_fn(|r, c| m[r][c]);
        views.push(PosedImage::new(image, pose, focal_px)?);
    }
    Ok(views)
}
