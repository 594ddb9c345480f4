//! Cameras, rays, and transmittance-weighted volume rendering.
//!
//! A [`ViewKey`] is a camera on the synthetic orbit rig: azimuth, elevation,
//! and radius, plus intrinsics. Rendering marches each pixel's ray with
//! stratified coarse samples, importance-resamples from the coarse weights,
//! and composites both passes against a constant background. All pose and
//! quadrature arithmetic is f64; the field itself decides its own precision.
//!
//! Determinism: per-pixel jitter comes from one stream-per-pixel counter RNG,
//! and images are processed in fixed-size ray chunks, so output bits depend
//! only on (field, key, options), never on thread count or scheduling.

use nalgebra::Matrix4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::img::Image;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid view key: {0}")]
    BadKey(String),
    #[error("invalid render options: {0}")]
    BadOptions(String),
    #[error("field returned a non-finite value at ray {ray}, sample {sample}")]
    NonFiniteField { ray: usize, sample: usize },
}

/// Camera pose on the orbit rig plus pinhole intrinsics. The pose doubles as
/// the steganographic key: only a holder of these angles re-renders the
/// secret view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewKey {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub radius: f64,
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl ViewKey {
    /// Orbit camera with the stock rig: radius 4, depth range [2, 6], and a
    /// 50 degree horizontal field of view.
    pub fn with_defaults(theta_deg: f64, phi_deg: f64, width: usize, height: usize) -> Self {
        Self {
            theta_deg,
            phi_deg,
            radius: 4.0,
            focal_px: 0.5 * width as f64 / (25.0f64).to_radians().tan(),
            width,
            height,
            near: 2.0,
            far: 6.0,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |msg: String| Err(RenderError::BadKey(msg));
        if !self.theta_deg.is_finite() || !(-180.0..=180.0).contains(&self.theta_deg) {
            return bad(format!("theta {} outside [-180, 180]", self.theta_deg));
        }
        if !self.phi_deg.is_finite() || !(-180.0..=0.0).contains(&self.phi_deg) {
            return bad(format!("phi {} outside [-180, 0]", self.phi_deg));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return bad(format!("radius {} not positive", self.radius));
        }
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return bad(format!("focal {} not positive", self.focal_px));
        }
        if self.width < 8 || self.height < 8 {
            return bad(format!("{}x{} below the 8px minimum", self.width, self.height));
        }
        if !(self.near.is_finite() && self.far.is_finite() && self.near < self.far) {
            return bad(format!("near {} must precede far {}", self.near, self.far));
        }
        Ok(())
    }

    /// The same camera nudged by angle offsets; azimuth wraps, elevation
    /// clips to its legal range.
    pub fn offset(&self, dtheta_deg: f64, dphi_deg: f64) -> ViewKey {
        let mut theta = (self.theta_deg + dtheta_deg) % 360.0;
        if theta > 180.0 {
            theta -= 360.0;
        }
        if theta < -180.0 {
            theta += 360.0;
        }
        ViewKey {
            theta_deg: theta,
            phi_deg: (self.phi_deg + dphi_deg).clamp(-180.0, 0.0),
            ..self.clone()
        }
    }

    pub fn pose(&self) -> Matrix4<f64> {
        pose_from_angles(self.theta_deg, self.phi_deg, self.radius)
    }
}

/// Camera-to-world matrix for the orbit rig: translate out along z, tilt
/// about x by phi, spin about y by theta, then the axis flip that puts the
/// camera's -z on the scene.
pub fn pose_from_angles(theta_deg: f64, phi_deg: f64, radius: f64) -> Matrix4<f64> {
    let (st, ct) = theta_deg.to_radians().sin_cos();
    let (sp, cp) = phi_deg.to_radians().sin_cos();
    let translate = Matrix4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, radius, //
        0.0, 0.0, 0.0, 1.0,
    );
    let rot_phi = Matrix4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, cp, -sp, 0.0, //
        0.0, sp, cp, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    let rot_theta = Matrix4::new(
        ct, 0.0, -st, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        st, 0.0, ct, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    let flip = Matrix4::new(
        -1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    );
    flip * rot_theta * rot_phi * translate
}

#[derive(Clone, Debug)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

/// One ray per pixel, row-major. Directions point through pixel centers and
/// are unit length in world space.
pub fn camera_rays(key: &ViewKey) -> Vec<Ray> {
    rays_from_pose(
        &key.pose(),
        key.width,
        key.height,
        key.focal_px,
        key.near,
        key.far,
    )
}

/// Pixel rays for an arbitrary camera-to-world matrix, row-major over
/// pixels. The camera looks down its own -z.
pub fn rays_from_pose(
    pose: &Matrix4<f64>,
    width: usize,
    height: usize,
    focal_px: f64,
    near: f64,
    far: f64,
) -> Vec<Ray> {
    let origin = [pose[(0, 3)], pose[(1, 3)], pose[(2, 3)]];
    let mut rays = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            let cam = [
                (i as f64 + 0.5 - width as f64 / 2.0) / focal_px,
                -(j as f64 + 0.5 - height as f64 / 2.0) / focal_px,
                -1.0,
            ];
            let mut dir = [0.0f64; 3];
            for (r, d) in dir.iter_mut().enumerate() {
                *d = pose[(r, 0)] * cam[0] + pose[(r, 1)] * cam[1] + pose[(r, 2)] * cam[2];
            }
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            for d in &mut dir {
                *d /= norm;
            }
            rays.push(Ray {
                origin,
                direction: dir,
                t_near: near,
                t_far: far,
            });
        }
    }
    rays
}

/// Anything that maps world points (with a view direction) to color and
/// density. Implementations must return rgb in [0,1] and sigma >= 0, and must
/// be deterministic for fixed inputs.
pub trait FieldEval: Sync {
    /// `positions` and `dirs` are xyz-interleaved, length 3N. Returns
    /// (rgb, sigma) with lengths 3N and N.
    fn eval_batch(&self, positions: &[f64], dirs: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// Where stratified jitter comes from. `Seeded` draws one independent stream
/// per pixel index; `Midpoint` centers every sample in its bin, which is the
/// right choice for analytic comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JitterPolicy {
    Midpoint,
    Seeded(u64),
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f64; 3],
    pub jitter: JitterPolicy,
}

impl RenderOptions {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.n_coarse < 2 {
            return Err(RenderError::BadOptions(format!(
                "n_coarse {} below minimum 2",
                self.n_coarse
            )));
        }
        if !self.background.iter().all(|b| b.is_finite()) {
            return Err(RenderError::BadOptions("non-finite background".into()));
        }
        Ok(())
    }
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
            background: [1.0, 1.0, 1.0],
            jitter: JitterPolicy::Seeded(0),
        }
    }
}

fn pixel_rng(policy: JitterPolicy, pixel_index: u64) -> Option<ChaCha8Rng> {
    match policy {
        JitterPolicy::Midpoint => None,
        JitterPolicy::Seeded(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pixel_index);
            Some(rng)
        }
    }
}

/// Stratified depths: one sample per equal-width bin over [t_near, t_far].
pub fn stratified_ts(ray: &Ray, n: usize, mut rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let width = (ray.t_far - ray.t_near) / n as f64;
    (0..n)
        .map(|i| {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            ray.t_near + (i as f64 + u) * width
        })
        .collect()
}

/// Inverse-CDF draws from the piecewise-constant density proportional to
/// `weights` over the bins delimited by `edges` (len = weights + 1,
/// ascending). All-zero weights fall back to uniform over the whole range.
/// Outputs are sorted.
pub fn hierarchical_resample(
    edges: &[f64],
    weights: &[f64],
    n_fine: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1, "edges must bracket weights");
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n_fine);
    if total <= 0.0 {
        let (lo, hi) = (edges[0], edges[edges.len() - 1]);
        for i in 0..n_fine {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            out.push(lo + (i as f64 + u) / n_fine as f64 * (hi - lo));
        }
        return out;
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;
    for i in 0..n_fine {
        let jitter = match rng.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let u = (i as f64 + jitter) / n_fine as f64;
        // Last bin with cdf[j] <= u keeps zero-weight bins unreachable.
        let j = match cdf[..cdf.len() - 1]
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(exact) => exact,
            Err(ins) => ins - 1,
        };
        let span = cdf[j + 1] - cdf[j];
        let frac = if span > 0.0 { (u - cdf[j]) / span } else { 0.5 };
        out.push(edges[j] + frac * (edges[j + 1] - edges[j]));
    }
    out.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Quadrature of one ray at fixed depths: alpha from optical thickness, then
/// front-to-back transmittance compositing over the background.
struct Composited {
    rgb: [f64; 3],
    weights: Vec<f64>,
    residual: f64,
}

fn composite_samples(
    ts: &[f64],
    t_far: f64,
    rgb: &[f64],
    sigma: &[f64],
    background: [f64; 3],
) -> Composited {
    let n = ts.len();
    let mut weights = vec![0.0f64; n];
    let mut trans = 1.0f64;
    let mut out = [0.0f64; 3];
    for i in 0..n {
        let delta = if i + 1 < n { ts[i + 1] - ts[i] } else { t_far - ts[i] };
        let alpha = 1.0 - (-sigma[i] * delta).exp();
        let w = trans * alpha;
        weights[i] = w;
        for c in 0..3 {
            out[c] += w * rgb[3 * i + c];
        }
        trans *= 1.0 - alpha;
    }
    for c in 0..3 {
        out[c] += trans * background[c];
    }
    Composited {
        rgb: out,
        weights,
        residual: trans,
    }
}

#[derive(Debug)]
pub struct RayRender {
    pub rgb_coarse: [f64; 3],
    pub rgb_fine: [f64; 3],
    pub coarse_ts: Vec<f64>,
    pub coarse_weights: Vec<f64>,
    pub coarse_residual: f64,
    pub fine_residual: f64,
}

/// Renders a contiguous batch of rays, batching field evaluation across the
/// whole chunk. `pixel_indices` seed each ray's jitter stream.
fn render_chunk<C: FieldEval + ?Sized, F: FieldEval + ?Sized>(
    coarse_field: &C,
    fine_field: &F,
    rays: &[Ray],
    pixel_indices: &[u64],
    opts: &RenderOptions,
) -> Result<Vec<RayRender>, RenderError> {
    let n_rays = rays.len();
    let nc = opts.n_coarse;
    let n_union = nc + opts.n_fine;
    let mut rngs: Vec<Option<ChaCha8Rng>> = pixel_indices
        .iter()
        .map(|&p| pixel_rng(opts.jitter, p))
        .collect();

    let mut coarse_ts = Vec::with_capacity(n_rays);
    let mut positions = vec![0.0f64; n_rays * nc * 3];
    let mut dirs = vec![0.0f64; n_rays * nc * 3];
    for (r, ray) in rays.iter().enumerate() {
        let ts = stratified_ts(ray, nc, rngs[r].as_mut());
        for (s, &t) in ts.iter().enumerate() {
            let at = (r * nc + s) * 3;
            for c in 0..3 {
                positions[at + c] = ray.origin[c] + t * ray.direction[c];
                dirs[at + c] = ray.direction[c];
            }
        }
        coarse_ts.push(ts);
    }
    let (rgb_c, sigma_c) = coarse_field.eval_batch(&positions, &dirs);
    check_finite(&rgb_c, &sigma_c, pixel_indices, nc)?;

    let mut results = Vec::with_capacity(n_rays);
    let mut union_ts = Vec::with_capacity(n_rays);
    let mut fine_positions = vec![0.0f64; n_rays * n_union * 3];
    let mut fine_dirs = vec![0.0f64; n_rays * n_union * 3];
    for (r, ray) in rays.iter().enumerate() {
        let ts = &coarse_ts[r];
        let comp = composite_samples(
            ts,
            ray.t_far,
            &rgb_c[r * nc * 3..(r + 1) * nc * 3],
            &sigma_c[r * nc..(r + 1) * nc],
            opts.background,
        );
        let mut edges = ts.clone();
        edges.push(ray.t_far);
        let fine_ts =
            hierarchical_resample(&edges, &comp.weights, opts.n_fine, rngs[r].as_mut());
        let mut merged = Vec::with_capacity(n_union);
        merged.extend_from_slice(ts);
        merged.extend_from_slice(&fine_ts);
        merged.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        for (s, &t) in merged.iter().enumerate() {
            let at = (r * n_union + s) * 3;
            for c in 0..3 {
                fine_positions[at + c] = ray.origin[c] + t * ray.direction[c];
                fine_dirs[at + c] = ray.direction[c];
            }
        }
        union_ts.push(merged);
        results.push(RayRender {
            rgb_coarse: comp.rgb,
            rgb_fine: [0.0; 3],
            coarse_ts: ts.clone(),
            coarse_weights: comp.weights,
            coarse_residual: comp.residual,
            fine_residual: 0.0,
        });
    }
    let (rgb_f, sigma_f) = fine_field.eval_batch(&fine_positions, &fine_dirs);
    check_finite(&rgb_f, &sigma_f, pixel_indices, n_union)?;
    for (r, ray) in rays.iter().enumerate() {
        let comp = composite_samples(
            &union_ts[r],
            ray.t_far,
            &rgb_f[r * n_union * 3..(r + 1) * n_union * 3],
            &sigma_f[r * n_union..(r + 1) * n_union],
            opts.background,
        );
        results[r].rgb_fine = comp.rgb;
        results[r].fine_residual = comp.residual;
    }
    Ok(results)
}

fn check_finite(
    rgb: &[f64],
    sigma: &[f64],
    pixel_indices: &[u64],
    samples_per_ray: usize,
) -> Result<(), RenderError> {
    for (i, &s) in sigma.iter().enumerate() {
        let bad_rgb = rgb[3 * i..3 * i + 3].iter().any(|v| !v.is_finite());
        if !s.is_finite() || bad_rgb {
            return Err(RenderError::NonFiniteField {
                ray: pixel_indices[i / samples_per_ray] as usize,
                sample: i % samples_per_ray,
            });
        }
    }
    Ok(())
}

/// Renders one ray. `pixel_index` selects the jitter stream, exactly as the
/// same pixel would get inside [`render_image`].
pub fn render_ray<C: FieldEval + ?Sized, F: FieldEval + ?Sized>(
    coarse_field: &C,
    fine_field: &F,
    ray: &Ray,
    opts: &RenderOptions,
    pixel_index: u64,
) -> Result<RayRender, RenderError> {
    opts.validate()?;
    let mut out = render_chunk(
        coarse_field,
        fine_field,
        std::slice::from_ref(ray),
        &[pixel_index],
        opts,
    )?;
    Ok(out.pop().expect("one ray in, one render out"))
}

/// Rays per parallel work unit. Fixed so results never depend on worker
/// count.
const RENDER_CHUNK_RAYS: usize = 1024;

/// Renders the full view through the fine network, clamped to [0,1].
pub fn render_image<C: FieldEval + ?Sized, F: FieldEval + ?Sized>(
    coarse_field: &C,
    fine_field: &F,
    key: &ViewKey,
    opts: &RenderOptions,
) -> Result<Image, RenderError> {
    key.validate()?;
    opts.validate()?;
    let rays = camera_rays(key);
    let chunk_results: Vec<Result<Vec<RayRender>, RenderError>> = rays
        .par_chunks(RENDER_CHUNK_RAYS)
        .enumerate()
        .map(|(ci, chunk)| {
            let base = ci * RENDER_CHUNK_RAYS;
            let pixel_indices: Vec<u64> =
                (base..base + chunk.len()).map(|p| p as u64).collect();
            render_chunk(coarse_field, fine_field, chunk, &pixel_indices, opts)
        })
        .collect();
    let mut image = Image::new(key.width, key.height);
    let plane = key.width * key.height;
    let data = image.channel_major_mut();
    let mut at = 0usize;
    for chunk in chunk_results {
        for ray in chunk? {
            for c in 0..3 {
                data[c * plane + at] = ray.rgb_fine[c].clamp(0.0, 1.0) as f32;
            }
            at += 1;
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Empty space.
    struct Vacuum;
    impl FieldEval for Vacuum {
        fn eval_batch(&self, positions: &[f64], _dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
            (vec![0.3; positions.len()], vec![0.0; positions.len() / 3])
        }
    }

    /// Constant density and color everywhere.
    struct Slab {
        sigma: f64,
        color: [f64; 3],
    }
    impl FieldEval for Slab {
        fn eval_batch(&self, positions: &[f64], _dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let n = positions.len() / 3;
            let mut rgb = Vec::with_capacity(3 * n);
            for _ in 0..n {
                rgb.extend_from_slice(&self.color);
            }
            (rgb, vec![self.sigma; n])
        }
    }

    /// Smooth analytic density bump centered at the origin.
    struct Bump;
    impl FieldEval for Bump {
        fn eval_batch(&self, positions: &[f64], dirs: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let n = positions.len() / 3;
            let mut rgb = Vec::with_capacity(3 * n);
            let mut sigma = Vec::with_capacity(n);
            for i in 0..n {
                let p = &positions[3 * i..3 * i + 3];
                let d = &dirs[3 * i..3 * i + 3];
                let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                sigma.push(3.0 * (-r2).exp());
                rgb.push(0.5 + 0.4 * (p[0]).sin() * d[0]);
                rgb.push(0.5 + 0.3 * (p[1] * 2.0).cos());
                rgb.push(0.5 - 0.2 * (p[2]).sin());
            }
            (rgb, sigma)
        }
    }

    fn test_ray() -> Ray {
        Ray {
            origin: [0.0, 0.0, 4.0],
            direction: [0.0, 0.0, -1.0],
            t_near: 2.0,
            t_far: 6.0,
        }
    }

    fn midpoint_opts(n_coarse: usize) -> RenderOptions {
        RenderOptions {
            n_coarse,
            n_fine: n_coarse,
            background: [1.0, 1.0, 1.0],
            jitter: JitterPolicy::Midpoint,
        }
    }

    #[test]
    fn pose_zero_angles_sits_at_radius() {
        let m = pose_from_angles(0.0, 0.0, 4.0);
        let t = [m[(0, 3)], m[(1, 3)], m[(2, 3)]];
        let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        assert!((norm - 4.0).abs() < 1e-12);
    }

    #[test]
    fn pose_rotation_block_is_special_orthogonal() {
        for theta in [-180.0, -77.0, 0.0, 13.5, 90.0, 180.0] {
            for phi in [-180.0, -90.0, -30.0, 0.0] {
                let m = pose_from_angles(theta, phi, 4.0);
                let r = m.fixed_view::<3, 3>(0, 0);
                let should_be_identity = r.transpose() * r;
                for i in 0..3 {
                    for j in 0..3 {
                        let want = if i == j { 1.0 } else { 0.0 };
                        assert!(
                            (should_be_identity[(i, j)] - want).abs() < 1e-6,
                            "theta {theta} phi {phi}"
                        );
                    }
                }
                assert!((r.determinant() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pose_matches_hand_multiplied_matrix() {
        let m = pose_from_angles(30.0, -30.0, 4.0);
        let expected = [
            [-0.8660254038, -0.25, 0.4330127019, 1.7320508076],
            [0.5, -0.4330127019, 0.75, 3.0],
            [0.0, 0.8660254038, 0.5, 2.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        for (i, row) in expected.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                assert!(
                    (m[(i, j)] - want).abs() < 1e-6,
                    "({i},{j}): got {}, want {want}",
                    m[(i, j)]
                );
            }
        }
    }

    #[test]
    fn rays_share_origin_and_center_points_at_scene() {
        let key = ViewKey::with_defaults(40.0, -25.0, 16, 16);
        let rays = camera_rays(&key);
        assert_eq!(rays.len(), 256);
        for ray in &rays {
            assert_eq!(ray.origin, rays[0].origin);
            let n = ray.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let o = rays[0].origin;
        let toward = [-o[0] / 4.0, -o[1] / 4.0, -o[2] / 4.0];
        let center = &rays[(8 * 16 + 8) as usize];
        let dot: f64 = center
            .direction
            .iter()
            .zip(&toward)
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot > 0.99, "center ray not aimed at the scene: {dot}");
    }

    #[test]
    fn corner_ray_angle_matches_closed_form() {
        let key = ViewKey::with_defaults(0.0, 0.0, 32, 24);
        let rays = camera_rays(&key);
        let center_cam_axis = {
            let pose = key.pose();
            [-pose[(0, 2)], -pose[(1, 2)], -pose[(2, 2)]]
        };
        let corner = &rays[0];
        let dot: f64 = corner
            .direction
            .iter()
            .zip(&center_cam_axis)
            .map(|(a, b)| a * b)
            .sum();
        let got = dot.clamp(-1.0, 1.0).acos();
        let half_w: f64 = 16.0 - 0.5;
        let half_h: f64 = 12.0 - 0.5;
        let want = ((half_w * half_w + half_h * half_h).sqrt() / key.focal_px).atan();
        assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
    }

    #[test]
    fn key_validation_catches_bad_fields() {
        assert!(ViewKey::with_defaults(0.0, 0.0, 64, 64).validate().is_ok());
        assert!(ViewKey::with_defaults(200.0, 0.0, 64, 64).validate().is_err());
        assert!(ViewKey::with_defaults(0.0, 10.0, 64, 64).validate().is_err());
        assert!(ViewKey::with_defaults(0.0, 0.0, 4, 64).validate().is_err());
        let mut k = ViewKey::with_defaults(0.0, 0.0, 64, 64);
        k.near = 7.0;
        assert!(k.validate().is_err());
    }

    #[test]
    fn offset_wraps_azimuth_and_clips_elevation() {
        let k = ViewKey::with_defaults(170.0, -10.0, 64, 64);
        let o = k.offset(30.0, 20.0);
        assert!((o.theta_deg - -160.0).abs() < 1e-12);
        assert_eq!(o.phi_deg, 0.0);
        let o2 = k.offset(-360.0, -300.0);
        assert!((o2.theta_deg - 170.0).abs() < 1e-12);
        assert_eq!(o2.phi_deg, -180.0);
    }

    #[test]
    fn zero_density_returns_exact_background() {
        let opts = midpoint_opts(16);
        let r = render_ray(&Vacuum, &Vacuum, &test_ray(), &opts, 0).unwrap();
        assert_eq!(r.rgb_fine, [1.0, 1.0, 1.0]);
        assert_eq!(r.rgb_coarse, [1.0, 1.0, 1.0]);
        assert!(r.coarse_weights.iter().all(|&w| w == 0.0));
        assert_eq!(r.coarse_residual, 1.0);
    }

    #[test]
    fn homogeneous_slab_matches_analytic_transmittance() {
        let slab = Slab {
            sigma: 0.5,
            color: [0.2, 0.4, 0.6],
        };
        let analytic = 1.0 - (-0.5f64 * 4.0).exp();
        let opts = midpoint_opts(256);
        let r = render_ray(&slab, &slab, &test_ray(), &opts, 0).unwrap();
        let wsum: f64 = r.coarse_weights.iter().sum();
        assert!(
            (wsum - analytic).abs() < 1e-3,
            "sum of weights {wsum} vs analytic {analytic}"
        );
    }

    #[test]
    fn slab_error_shrinks_as_samples_double() {
        let slab = Slab {
            sigma: 0.5,
            color: [0.5, 0.5, 0.5],
        };
        let analytic = 1.0 - (-0.5f64 * 4.0).exp();
        let mut last = f64::INFINITY;
        for n in [32, 64, 128] {
            let r = render_ray(&slab, &slab, &test_ray(), &midpoint_opts(n), 0).unwrap();
            let wsum: f64 = r.coarse_weights.iter().sum();
            let err = (wsum - analytic).abs();
            assert!(err < last, "error {err} did not shrink at n={n}");
            last = err;
        }
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let slab = Slab {
            sigma: 2000.0,
            color: [0.1, 0.7, 0.3],
        };
        let r = render_ray(&slab, &slab, &test_ray(), &midpoint_opts(16), 0).unwrap();
        for c in 0..3 {
            assert!((r.rgb_fine[c] - slab.color[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn partition_of_unity_holds_per_ray() {
        let opts = RenderOptions {
            n_coarse: 48,
            n_fine: 48,
            background: [1.0, 1.0, 1.0],
            jitter: JitterPolicy::Seeded(11),
        };
        let key = ViewKey::with_defaults(25.0, -40.0, 8, 8);
        for (p, ray) in camera_rays(&key).iter().enumerate() {
            let r = render_ray(&Bump, &Bump, ray, &opts, p as u64).unwrap();
            let total = r.coarse_weights.iter().sum::<f64>() + r.coarse_residual;
            assert!((total - 1.0).abs() < 1e-5, "ray {p}: {total}");
            // Transmittance is non-increasing, so weights never outrun what
            // remains.
            let mut remaining = 1.0;
            for &w in &r.coarse_weights {
                assert!(w <= remaining + 1e-12);
                remaining -= w;
            }
        }
    }

    #[test]
    fn resample_concentrates_in_heavy_bin() {
        let edges = [0.0, 1.0, 2.0, 3.0, 4.0];
        let weights = [0.0, 0.0, 5.0, 0.0];
        let mut rng = pixel_rng(JitterPolicy::Seeded(3), 0);
        let ts = hierarchical_resample(&edges, &weights, 64, rng.as_mut());
        assert_eq!(ts.len(), 64);
        assert!(ts.iter().all(|&t| (2.0..=3.0).contains(&t)), "{ts:?}");
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn resample_uniform_weights_track_uniform_cdf() {
        let edges: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
        let weights = vec![1.0; 32];
        let mut rng = pixel_rng(JitterPolicy::Seeded(4), 7);
        let ts = hierarchical_resample(&edges, &weights, 10_000, rng.as_mut());
        let mut sup = 0.0f64;
        for (i, &t) in ts.iter().enumerate() {
            let empirical = i as f64 / ts.len() as f64;
            sup = sup.max((empirical - t).abs());
        }
        assert!(sup < 0.05, "sup-norm distance {sup}");
    }

    #[test]
    fn resample_zero_weights_uniform_fallback() {
        let edges = [2.0, 2.5, 3.0, 3.5, 4.0];
        let weights = [0.0; 4];
        let mut rng = pixel_rng(JitterPolicy::Seeded(5), 0);
        let ts = hierarchical_resample(&edges, &weights, 100, rng.as_mut());
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert!(ts.iter().all(|&t| (2.0..=4.0).contains(&t)));
        assert!(ts.iter().any(|&t| t < 2.6) && ts.iter().any(|&t| t > 3.4));
    }

    #[test]
    fn render_image_deterministic_and_matches_reference_loop() {
        let key = ViewKey::with_defaults(30.0, -30.0, 16, 16);
        let opts = RenderOptions {
            n_coarse: 24,
            n_fine: 24,
            background: [1.0, 1.0, 1.0],
            jitter: JitterPolicy::Seeded(9),
        };
        let img1 = render_image(&Bump, &Bump, &key, &opts).unwrap();
        let img2 = render_image(&Bump, &Bump, &key, &opts).unwrap();
        assert_eq!(img1, img2);

        // Reference: plain per-ray loop, no chunking.
        let rays = camera_rays(&key);
        for (p, ray) in rays.iter().enumerate() {
            let r = render_ray(&Bump, &Bump, ray, &opts, p as u64).unwrap();
            let got = img1.get(p % 16, p / 16);
            for (g, fine) in got.iter().zip(r.rgb_fine) {
                assert_eq!(*g, fine.clamp(0.0, 1.0) as f32, "pixel {p}");
            }
        }
    }

    #[test]
    fn non_finite_field_is_reported_with_sample() {
        struct Poison;
        impl FieldEval for Poison {
            fn eval_batch(&self, positions: &[f64], _d: &[f64]) -> (Vec<f64>, Vec<f64>) {
                let n = positions.len() / 3;
                let mut sigma = vec![0.1; n];
                sigma[3] = f64::NAN;
                (vec![0.5; positions.len()], sigma)
            }
        }
        let err = render_ray(&Poison, &Poison, &test_ray(), &midpoint_opts(8), 5).unwrap_err();
        match err {
            RenderError::NonFiniteField { ray, sample } => {
                assert_eq!(ray, 5);
                assert_eq!(sample, 3);
            }
            other => panic!("wrong error {other:?}"),
        }
    }
}
