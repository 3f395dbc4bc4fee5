//! Tile-based differentiable splatting of frame-space Gaussians.
//!
//! Gaussians are projected, globally sorted front to back by view depth
//! (ties by index) and binned into 16×16 pixel tiles using the bounding
//! rectangle of their 3σ screen-space ellipse. Each pixel composites
//!
//! ```text
//! C = Σ c_i σ_i T_i + T_final · background,   σ_i = α_i exp(-½ dᵀ Q_i d)
//! ```
//!
//! skipping Gaussians whose Mahalanobis distance exceeds 3 and stopping once
//! transmittance falls below [`MIN_TRANSMITTANCE`]. The backward pass reverses
//! the recurrence exactly using suffix sums, without dividing by `1 - σ`.

mod camera;
mod project;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};

pub use camera::Camera;
pub use project::{project, project_backward, ProjectGrad, Projected, CUTOFF_SIGMAS, DILATION};

use crate::error::{Error, Result};

pub const TILE_SIZE: usize = 16;

/// Blending stops after the Gaussian that pushes transmittance below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

const MAX_POWER: f64 = CUTOFF_SIGMAS * CUTOFF_SIGMAS;
const RECT_PAD: f64 = 1e-9;

/// Frame-space Gaussians ready for rendering.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatScene {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    /// Opacities in `[0, 1]`.
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl SplatScene {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, mean: Vector3<f64>, cov: Matrix3<f64>, opacity: f64, color: [f64; 3]) {
        self.means.push(mean);
        self.covariances.push(cov);
        self.opacities.push(opacity);
        self.colors.push(color);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        for (what, len) in [
            ("covariances", self.covariances.len()),
            ("opacities", self.opacities.len()),
            ("colors", self.colors.len()),
        ] {
            if len != n {
                return Err(Error::dimension(format!("scene.{what}"), n, len));
            }
        }
        Ok(())
    }

    fn fingerprint(&self, camera: &Camera, background: &[f64; 3]) -> u64 {
        let mut h = DefaultHasher::new();
        let mut put = |x: f64| x.to_bits().hash(&mut h);
        for i in 0..self.len() {
            self.means[i].iter().for_each(|&x| put(x));
            self.covariances[i].iter().for_each(|&x| put(x));
            put(self.opacities[i]);
            self.colors[i].iter().for_each(|&x| put(x));
        }
        for x in [camera.fx, camera.fy, camera.cx, camera.cy, camera.near, camera.far] {
            put(x);
        }
        camera.rotation.iter().flatten().for_each(|&x| put(x));
        camera.translation.iter().for_each(|&x| put(x));
        background.iter().for_each(|&x| put(x));
        camera.width.hash(&mut h);
        camera.height.hash(&mut h);
        self.len().hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `H × W × 3`.
    pub color: Array3<f64>,
    /// Alpha-weighted expected view depth, `H × W`.
    pub depth: Array2<f64>,
    /// `1 - final transmittance`, `H × W`.
    pub alpha: Array2<f64>,
}

/// Forward state needed by [`rasterize_backward`].
#[derive(Debug, Clone)]
pub struct RasterCache {
    fingerprint: u64,
    projected: Vec<Option<Projected>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    background: [f64; 3],
}

impl RasterCache {
    pub fn projected(&self) -> &[Option<Projected>] {
        &self.projected
    }

    pub fn num_visible(&self) -> usize {
        self.projected.iter().filter(|p| p.is_some()).count()
    }
}

/// Upstream gradients of a scalar loss with respect to the render outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub color: Array3<f64>,
    pub depth: Option<Array2<f64>>,
    pub alpha: Option<Array2<f64>>,
}

impl OutputGrads {
    pub fn zeros(height: usize, width: usize) -> Self {
        OutputGrads {
            color: Array3::zeros((height, width, 3)),
            depth: None,
            alpha: None,
        }
    }
}

/// Per-Gaussian gradients. World-space entries are full (non-symmetrized)
/// matrix gradients; screen-space ones are kept for statistics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub mean2d: Vec<Vector2<f64>>,
    pub cov2d: Vec<Matrix2<f64>>,
    /// Norm of the positional gradient in normalized device coordinates,
    /// `‖(∂L/∂u · W/2, ∂L/∂v · H/2)‖`; zero for culled Gaussians.
    pub view_grad_norm: Vec<f64>,
    /// Whether the Gaussian survived culling.
    pub visible: Vec<bool>,
}

impl SceneGrads {
    fn zeros(n: usize) -> Self {
        SceneGrads {
            means: vec![Vector3::zeros(); n],
            covariances: vec![Matrix3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            mean2d: vec![Vector2::zeros(); n],
            cov2d: vec![Matrix2::zeros(); n],
            view_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

fn tile_grid(camera: &Camera) -> (usize, usize) {
    (camera.width.div_ceil(TILE_SIZE), camera.height.div_ceil(TILE_SIZE))
}

/// Pixel index range whose centers may fall inside the footprint.
fn pixel_range(center: f64, half: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - half - 0.5 - RECT_PAD).ceil().max(0.0);
    let hi = (center + half - 0.5 + RECT_PAD).floor().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Front-to-back order: ascending view depth, ties by ascending index.
fn sort_order(projected: &[Option<Projected>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).filter(|&i| projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (projected[a].as_ref().unwrap().depth, projected[b].as_ref().unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

fn build_cache(scene: &SplatScene, camera: &Camera, background: &[f64; 3]) -> Result<RasterCache> {
    scene.validate()?;
    camera.validate()?;
    let projected: Vec<Option<Projected>> = (0..scene.len())
        .map(|i| project(&scene.means[i], &scene.covariances[i], camera))
        .collect();
    let (tiles_x, tiles_y) = tile_grid(camera);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for idx in sort_order(&projected) {
        let p = projected[idx].as_ref().unwrap();
        let Some((x0, x1)) = pixel_range(p.mean2d.x, p.half_extent.x, camera.width) else {
            continue;
        };
        let Some((y0, y1)) = pixel_range(p.mean2d.y, p.half_extent.y, camera.height) else {
            continue;
        };
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(idx as u32);
            }
        }
    }
    Ok(RasterCache {
        fingerprint: scene.fingerprint(camera, background),
        projected,
        tiles,
        tiles_x,
        background: *background,
    })
}

/// One composited contribution at a pixel.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    index: usize,
    /// Position in the tile list.
    slot: usize,
    /// Offset from the Gaussian mean to the pixel center.
    d: Vector2<f64>,
    gauss: f64,
    sigma: f64,
    transmittance: f64,
}

/// Screen-space footprint value `exp(-½ dᵀ Q d)`, or `None` past the cutoff.
#[inline]
fn footprint(p: &Projected, px: f64, py: f64) -> Option<(Vector2<f64>, f64)> {
    let d = Vector2::new(px - p.mean2d.x, py - p.mean2d.y);
    let q = &p.conic;
    let power = q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y;
    if !(power <= MAX_POWER) {
        return None;
    }
    Some((d, (-0.5 * power).exp()))
}

/// Composite one pixel, optionally recording the contributions.
fn shade_pixel(
    list: &[u32],
    cache: &RasterCache,
    scene: &SplatScene,
    x: usize,
    y: usize,
    mut record: Option<&mut Vec<Contribution>>,
) -> ([f64; 3], f64, f64) {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut depth = 0.0;
    for (slot, &idx) in list.iter().enumerate() {
        let idx = idx as usize;
        let p = cache.projected[idx].as_ref().unwrap();
        let Some((d, gauss)) = footprint(p, px, py) else {
            continue;
        };
        let sigma = scene.opacities[idx] * gauss;
        let w = sigma * t;
        let col = &scene.colors[idx];
        for ch in 0..3 {
            c[ch] += col[ch] * w;
        }
        depth += p.depth * w;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution {
                index: idx,
                slot,
                d,
                gauss,
                sigma,
                transmittance: t,
            });
        }
        t *= 1.0 - sigma;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += t * cache.background[ch];
    }
    (c, depth, 1.0 - t)
}

fn render_tile(
    tile: usize,
    cache: &RasterCache,
    scene: &SplatScene,
    camera: &Camera,
    out: &mut RenderOutput,
) {
    let (tx, ty) = (tile % cache.tiles_x, tile / cache.tiles_x);
    let list = &cache.tiles[tile];
    for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(camera.height) {
        for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(camera.width) {
            let (c, d, a) = shade_pixel(list, cache, scene, x, y, None);
            for ch in 0..3 {
                out.color[[y, x, ch]] = c[ch];
            }
            out.depth[[y, x]] = d;
            out.alpha[[y, x]] = a;
        }
    }
}

/// Render `scene` through `camera` over a constant `background`.
pub fn rasterize(scene: &SplatScene, camera: &Camera, background: [f64; 3]) -> Result<(RenderOutput, RasterCache)> {
    let cache = build_cache(scene, camera, &background)?;
    let order: Vec<usize> = (0..cache.tiles.len()).collect();
    let out = render_tiles(scene, camera, &cache, &order);
    Ok((out, cache))
}

fn render_tiles(scene: &SplatScene, camera: &Camera, cache: &RasterCache, order: &[usize]) -> RenderOutput {
    let (h, w) = (camera.height, camera.width);
    let mut out = RenderOutput {
        color: Array3::zeros((h, w, 3)),
        depth: Array2::zeros((h, w)),
        alpha: Array2::zeros((h, w)),
    };
    for &tile in order {
        render_tile(tile, cache, scene, camera, &mut out);
    }
    out
}

/// Number of tiles for `camera`.
#[doc(hidden)]
pub fn tile_count(camera: &Camera) -> usize {
    let (tx, ty) = tile_grid(camera);
    tx * ty
}

/// Forward and backward with tiles visited in a caller-chosen order; used
/// to check that results do not depend on scheduling.
#[doc(hidden)]
pub fn render_with_tile_order(
    scene: &SplatScene,
    camera: &Camera,
    background: [f64; 3],
    grads: &OutputGrads,
    order: &[usize],
) -> Result<(RenderOutput, SceneGrads)> {
    let cache = build_cache(scene, camera, &background)?;
    check_order(order, cache.tiles.len())?;
    let out = render_tiles(scene, camera, &cache, order);
    let g = backward_impl(scene, camera, &cache, grads, order)?;
    Ok((out, g))
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &t in order {
        if t >= n || seen[t] {
            return Err(Error::Validation(format!("tile order is not a permutation of 0..{n}")));
        }
        seen[t] = true;
    }
    if order.len() != n {
        return Err(Error::Validation(format!("tile order is not a permutation of 0..{n}")));
    }
    Ok(())
}

/// Screen-space gradient partial sums of one tile.
#[derive(Default)]
struct TilePartial {
    /// (gaussian, d_opacity, d_color, d_mean2d, d_conic, d_depth)
    entries: Vec<(usize, f64, [f64; 3], Vector2<f64>, Matrix2<f64>, f64)>,
}

fn backward_tile(
    tile: usize,
    cache: &RasterCache,
    scene: &SplatScene,
    camera: &Camera,
    grads: &OutputGrads,
) -> TilePartial {
    let (tx, ty) = (tile % cache.tiles_x, tile / cache.tiles_x);
    let list = &cache.tiles[tile];
    let mut partial = TilePartial::default();
    for &idx in list {
        partial
            .entries
            .push((idx as usize, 0.0, [0.0; 3], Vector2::zeros(), Matrix2::zeros(), 0.0));
    }
    let mut contribs = Vec::new();
    for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(camera.height) {
        for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(camera.width) {
            let gc = [grads.color[[y, x, 0]], grads.color[[y, x, 1]], grads.color[[y, x, 2]]];
            let gd = grads.depth.as_ref().map_or(0.0, |g| g[[y, x]]);
            let ga = grads.alpha.as_ref().map_or(0.0, |g| g[[y, x]]);
            if gc == [0.0; 3] && gd == 0.0 && ga == 0.0 {
                continue;
            }
            contribs.clear();
            shade_pixel(list, cache, scene, x, y, Some(&mut contribs));
            // Suffix quantities after the current contribution.
            let mut s_color = cache.background;
            let mut s_depth = 0.0;
            let mut p_after = 1.0;
            for k in contribs.iter().rev() {
                let e = &mut partial.entries[k.slot];
                let p = cache.projected[k.index].as_ref().unwrap();
                let col = &scene.colors[k.index];
                let w = k.sigma * k.transmittance;
                let mut d_sigma = 0.0;
                for ch in 0..3 {
                    e.2[ch] += gc[ch] * w;
                    d_sigma += gc[ch] * k.transmittance * (col[ch] - s_color[ch]);
                }
                d_sigma += gd * k.transmittance * (p.depth - s_depth);
                d_sigma += ga * k.transmittance * p_after;
                e.5 += gd * w;

                e.1 += d_sigma * k.gauss;
                let d_power = -0.5 * d_sigma * k.sigma;
                // power = dᵀ Q d, d = pixel - mean.
                let qd = p.conic * k.d;
                e.3 += -2.0 * d_power * qd;
                e.4 += d_power * k.d * k.d.transpose();

                let one_minus = 1.0 - k.sigma;
                for ch in 0..3 {
                    s_color[ch] = col[ch] * k.sigma + one_minus * s_color[ch];
                }
                s_depth = p.depth * k.sigma + one_minus * s_depth;
                p_after *= one_minus;
            }
        }
    }
    partial
}

fn backward_impl(
    scene: &SplatScene,
    camera: &Camera,
    cache: &RasterCache,
    grads: &OutputGrads,
    order: &[usize],
) -> Result<SceneGrads> {
    let (h, w) = (camera.height, camera.width);
    if grads.color.dim() != (h, w, 3) {
        return Err(Error::dimension("output_grads.color", format!("{h}x{w}x3"), format!("{:?}", grads.color.dim())));
    }
    for (name, g) in [("depth", &grads.depth), ("alpha", &grads.alpha)] {
        if let Some(g) = g {
            if g.dim() != (h, w) {
                return Err(Error::dimension(format!("output_grads.{name}"), format!("{h}x{w}"), format!("{:?}", g.dim())));
            }
        }
    }
    let n = scene.len();
    let mut partials: Vec<Option<TilePartial>> = (0..cache.tiles.len()).map(|_| None).collect();
    for &tile in order {
        partials[tile] = Some(backward_tile(tile, cache, scene, camera, grads));
    }

    // Fixed-order reduction over tiles.
    let mut out = SceneGrads::zeros(n);
    let mut d_conic = vec![Matrix2::zeros(); n];
    let mut d_depth = vec![0.0; n];
    for partial in partials.into_iter().flatten() {
        for (idx, dop, dcol, dm, dq, dz) in partial.entries {
            out.opacities[idx] += dop;
            for ch in 0..3 {
                out.colors[idx][ch] += dcol[ch];
            }
            out.mean2d[idx] += dm;
            d_conic[idx] += dq;
            d_depth[idx] += dz;
        }
    }

    for i in 0..n {
        let Some(p) = cache.projected[i].as_ref() else {
            continue;
        };
        out.visible[i] = true;
        let dcov2d = -(p.conic * d_conic[i] * p.conic);
        out.cov2d[i] = dcov2d;
        let g = project_backward(p, camera, &out.mean2d[i], &dcov2d, d_depth[i]);
        out.means[i] = g.mean;
        out.covariances[i] = g.cov;
        let ndc = Vector2::new(out.mean2d[i].x * w as f64 * 0.5, out.mean2d[i].y * h as f64 * 0.5);
        out.view_grad_norm[i] = ndc.norm();
    }
    Ok(out)
}

/// Reverse-mode pass for a forward produced by [`rasterize`]. Fails when
/// `scene`, `camera` or the background differ from the cached forward.
pub fn rasterize_backward(
    scene: &SplatScene,
    camera: &Camera,
    cache: &RasterCache,
    grads: &OutputGrads,
) -> Result<SceneGrads> {
    if scene.fingerprint(camera, &cache.background) != cache.fingerprint {
        return Err(Error::Validation("rasterizer cache is stale: scene or camera changed since the forward pass".into()));
    }
    let order: Vec<usize> = (0..cache.tiles.len()).collect();
    backward_impl(scene, camera, cache, grads, &order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::new(40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = camera(20, 18);
        let bg = [0.2, 0.4, 0.6];
        let (out, _) = rasterize(&SplatScene::default(), &cam, bg).unwrap();
        for y in 0..18 {
            for x in 0..20 {
                assert_eq!(out.alpha[[y, x]], 0.0);
                for ch in 0..3 {
                    assert_eq!(out.color[[y, x, ch]], bg[ch]);
                }
            }
        }
    }

    #[test]
    fn opaque_gaussian_at_pixel_center() {
        let cam = camera(16, 16);
        // Principal point (8, 8) is a pixel corner; shift to the center of pixel (8, 8).
        let mut cam = cam;
        cam.cx = 8.5;
        cam.cy = 8.5;
        let mut s = SplatScene::default();
        s.push(Vector3::new(0.0, 0.0, 2.0), Matrix3::identity() * 1e-3, 1.0, [0.3, 0.7, 0.9]);
        let (out, _) = rasterize(&s, &cam, [0.0; 3]).unwrap();
        assert_eq!(out.alpha[[8, 8]], 1.0);
        assert_eq!(out.color[[8, 8, 1]], 0.7);
        assert_eq!(out.depth[[8, 8]], 2.0);
    }

    #[test]
    fn two_coincident_half_opaque() {
        let mut cam = camera(16, 16);
        cam.cx = 4.5;
        cam.cy = 4.5;
        let mut s = SplatScene::default();
        let cov = Matrix3::identity() * 1e-3;
        s.push(Vector3::new(0.0, 0.0, 2.0), cov, 0.5, [1.0, 0.0, 0.0]);
        s.push(Vector3::new(0.0, 0.0, 2.0), cov, 0.5, [0.0, 1.0, 0.0]);
        let (out, _) = rasterize(&s, &cam, [0.0; 3]).unwrap();
        assert_eq!(out.color[[4, 4, 0]], 0.5);
        assert_eq!(out.color[[4, 4, 1]], 0.25);
        assert_eq!(out.alpha[[4, 4]], 0.75);
    }

    #[test]
    fn zero_grads_give_zero() {
        let cam = camera(8, 8);
        let mut s = SplatScene::default();
        s.push(Vector3::new(0.01, 0.0, 1.0), Matrix3::identity() * 4e-3, 0.6, [0.5; 3]);
        let (_, cache) = rasterize(&s, &cam, [0.0; 3]).unwrap();
        let g = rasterize_backward(&s, &cam, &cache, &OutputGrads::zeros(8, 8)).unwrap();
        assert_eq!(g, SceneGrads { visible: vec![true], ..SceneGrads::zeros(1) });
    }

    #[test]
    fn color_grad_is_blend_weight() {
        let cam = camera(8, 8);
        let mut s = SplatScene::default();
        s.push(Vector3::new(0.0, 0.0, 1.0), Matrix3::identity() * 4e-3, 0.6, [0.5; 3]);
        let (out, cache) = rasterize(&s, &cam, [0.0; 3]).unwrap();
        let mut grads = OutputGrads::zeros(8, 8);
        grads.color.fill(1.0);
        let g = rasterize_backward(&s, &cam, &cache, &grads).unwrap();
        // Single Gaussian over black: dC/dc = σ = alpha at every pixel.
        assert_relative_eq!(g.colors[0][0], out.alpha.sum(), epsilon = 1e-12);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cam = camera(8, 8);
        let mut s = SplatScene::default();
        s.push(Vector3::new(0.0, 0.0, 1.0), Matrix3::identity() * 4e-3, 0.6, [0.5; 3]);
        let (_, cache) = rasterize(&s, &cam, [0.0; 3]).unwrap();
        s.opacities[0] = 0.7;
        assert!(rasterize_backward(&s, &cam, &cache, &OutputGrads::zeros(8, 8)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = camera(8, 8);
        let mut s = SplatScene::default();
        s.push(Vector3::new(0.02, -0.01, 1.0), Matrix3::new(4e-3, 1e-3, 0.0, 1e-3, 3e-3, 0.0, 0.0, 0.0, 2e-3), 0.6, [0.9, 0.2, 0.1]);
        s.push(Vector3::new(-0.03, 0.02, 1.3), Matrix3::identity() * 6e-3, 0.7, [0.1, 0.8, 0.3]);
        let gc = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 7 + x * 3 + c) as f64).sin());
        let gd = Array2::from_shape_fn((8, 8), |(y, x)| ((y + 2 * x) as f64).cos() * 0.1);
        let ga = Array2::from_shape_fn((8, 8), |(y, x)| ((3 * y + x) as f64).sin() * 0.5);
        let loss = |s: &SplatScene| {
            let (o, _) = rasterize(s, &cam, [0.1, 0.2, 0.3]).unwrap();
            (&o.color * &gc).sum() + (&o.depth * &gd).sum() + (&o.alpha * &ga).sum()
        };
        let (_, cache) = rasterize(&s, &cam, [0.1, 0.2, 0.3]).unwrap();
        let grads = OutputGrads {
            color: gc.clone(),
            depth: Some(gd.clone()),
            alpha: Some(ga.clone()),
        };
        let g = rasterize_backward(&s, &cam, &cache, &grads).unwrap();
        let h = 1e-6;
        let fd = |f: &dyn Fn(&mut SplatScene, f64)| {
            let mut a = s.clone();
            let mut b = s.clone();
            f(&mut a, h);
            f(&mut b, -h);
            (loss(&a) - loss(&b)) / (2.0 * h)
        };
        for i in 0..2 {
            assert_relative_eq!(g.opacities[i], fd(&|s, e| s.opacities[i] += e), epsilon = 1e-6);
            for c in 0..3 {
                assert_relative_eq!(g.colors[i][c], fd(&|s, e| s.colors[i][c] += e), epsilon = 1e-6);
                assert_relative_eq!(g.means[i][c], fd(&|s, e| s.means[i][c] += e), epsilon = 1e-5, max_relative = 1e-5);
            }
            for r in 0..3 {
                for c in 0..3 {
                    assert_relative_eq!(
                        g.covariances[i][(r, c)],
                        fd(&|s, e| s.covariances[i][(r, c)] += e),
                        epsilon = 1e-4,
                        max_relative = 1e-5
                    );
                }
            }
        }
    }

    #[test]
    fn tile_order_does_not_matter() {
        let cam = camera(40, 33);
        let mut s = SplatScene::default();
        for i in 0..30 {
            let f = i as f64;
            s.push(
                Vector3::new((f * 0.37).sin() * 0.4, (f * 0.91).cos() * 0.3, 1.5 + (f * 0.13).sin() * 0.3),
                Matrix3::identity() * (2e-3 + 1e-3 * (f * 0.5).sin().abs()),
                0.3 + 0.6 * (f * 1.7).sin().abs(),
                [(f * 0.3).sin().abs(), 0.5, (f * 0.2).cos().abs()],
            );
        }
        let mut grads = OutputGrads::zeros(33, 40);
        grads.color.iter_mut().enumerate().for_each(|(k, v)| *v = (k as f64 * 0.77).sin());
        let n = tile_count(&cam);
        let fwd: Vec<usize> = (0..n).collect();
        let rev: Vec<usize> = (0..n).rev().collect();
        let (o1, g1) = render_with_tile_order(&s, &cam, [0.0; 3], &grads, &fwd).unwrap();
        let (o2, g2) = render_with_tile_order(&s, &cam, [0.0; 3], &grads, &rev).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
        assert!(render_with_tile_order(&s, &cam, [0.0; 3], &grads, &fwd[1..]).is_err());
    }
}
