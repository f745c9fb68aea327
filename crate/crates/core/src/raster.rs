//! Tile-based ray/surfel rasterizer with front-to-back compositing.
//!
//! Every pixel casts a ray through its center and intersects it with the plane
//! of each candidate surfel, giving local `(u, v)` coordinates and a
//! camera-space depth. Fragments are sorted by `(depth, surfel id)` and
//! composited front to back. The fast path bins surfels into 16×16 tiles and
//! drops kernel values below a cutoff; with the cutoff disabled, binning is
//! bypassed and the output is bitwise identical to [`render_oracle`].

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imagebuf::{Image, Plane};
use crate::surfel::PosedSurfel;

pub const TILE_SIZE: u32 = 16;

/// Kernel values below this are skipped in the fast path (about 4.3σ).
pub const DEFAULT_KERNEL_CUTOFF: f64 = 1e-4;

/// Compositing stops once transmittance falls below this (fast path only).
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Rays closer than this to the surfel plane (unit vectors) do not intersect it.
pub const PARALLEL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// `None` disables both the cutoff and tile culling.
    pub kernel_cutoff: Option<f64>,
    pub early_termination: bool,
    pub background: [f64; 3],
}

impl RenderOptions {
    /// Training/default configuration.
    pub fn fast() -> Self {
        RenderOptions { kernel_cutoff: Some(DEFAULT_KERNEL_CUTOFF), early_termination: true, background: [0.0; 3] }
    }

    /// No cutoff, no culling, no early termination.
    pub fn exact() -> Self {
        RenderOptions { kernel_cutoff: None, early_termination: false, background: [0.0; 3] }
    }
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self::fast()
    }
}

/// Result of intersecting a pixel ray with a surfel plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// One surfel's contribution at one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub id: u32,
    pub depth: f64,
    pub u: f64,
    pub v: f64,
    /// Kernel value `G(u, v)`.
    pub kernel: f64,
    /// Surfel opacity.
    pub opacity: f64,
}

impl Fragment {
    #[inline]
    pub fn alpha(&self) -> f64 {
        self.opacity * self.kernel
    }
}

/// Camera-space surfel with the quantities needed per ray precomputed.
#[derive(Clone, Copy, Debug)]
struct Splat {
    p: Vector3<f64>,
    au: Vector3<f64>,
    av: Vector3<f64>,
    n: Vector3<f64>,
    n_norm: f64,
    /// `av × n / |n|²` and `n × au / |n|²`.
    mu: Vector3<f64>,
    mv: Vector3<f64>,
    opacity: f64,
    valid: bool,
}

impl Splat {
    fn new(camera: &Camera, s: &PosedSurfel) -> Self {
        let p = camera.to_camera(&s.center);
        let au = camera.rotation * s.axis_u;
        let av = camera.rotation * s.axis_v;
        let n = au.cross(&av);
        let nn = n.norm_squared();
        let valid = nn > 0.0 && nn.is_finite() && p.iter().all(|c| c.is_finite()) && s.opacity.is_finite();
        Splat {
            p,
            au,
            av,
            n,
            n_norm: nn.sqrt(),
            mu: av.cross(&n) / nn,
            mv: n.cross(&au) / nn,
            opacity: s.opacity,
            valid,
        }
    }

    #[inline]
    fn intersect(&self, d: &Vector3<f64>, near: f64) -> Option<Hit> {
        if !self.valid {
            return None;
        }
        let nd = self.n.dot(d);
        if nd.abs() < PARALLEL_EPS * self.n_norm * d.norm() {
            return None;
        }
        let depth = self.n.dot(&self.p) / nd;
        if !(depth > near) {
            return None;
        }
        let q = d * depth - self.p;
        Some(Hit { u: q.dot(&self.mu), v: q.dot(&self.mv), depth })
    }
}

/// Intersect the ray through the center of pixel `(i, j)` with a posed surfel.
pub fn ray_splat_intersect(camera: &Camera, pixel: (u32, u32), surfel: &PosedSurfel) -> Option<Hit> {
    Splat::new(camera, surfel).intersect(&camera.ray(pixel.0, pixel.1), camera.near)
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    #[inline]
    fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Surfel ids per 16×16 tile, plus each binned surfel's pixel footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub lists: Vec<Vec<u32>>,
    /// Conservative screen footprint per surfel; `None` when unbounded
    /// (no cutoff, or the surfel straddles the near plane).
    pub rects: Vec<Option<PixelRect>>,
}

impl TileBins {
    pub fn tile_of(&self, x: u32, y: u32) -> usize {
        (y / TILE_SIZE * self.tiles_x + x / TILE_SIZE) as usize
    }
}

enum Footprint {
    Culled,
    Unbounded,
    Rect(PixelRect),
}

fn footprint(camera: &Camera, splat: &Splat, radius: f64) -> Footprint {
    if !splat.valid {
        return Footprint::Culled;
    }
    let ext = Vector3::from_fn(|i, _| radius * (splat.au[i] * splat.au[i] + splat.av[i] * splat.av[i]).sqrt());
    let (zmin, zmax) = (splat.p.z - ext.z, splat.p.z + ext.z);
    if zmax <= camera.near {
        return Footprint::Culled;
    }
    if zmin <= camera.near {
        return Footprint::Unbounded;
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let c = Vector3::new(
            splat.p.x + if corner & 1 == 0 { -ext.x } else { ext.x },
            splat.p.y + if corner & 2 == 0 { -ext.y } else { ext.y },
            splat.p.z + if corner & 4 == 0 { -ext.z } else { ext.z },
        );
        let px = camera.project(&c);
        xmin = xmin.min(px.x);
        xmax = xmax.max(px.x);
        ymin = ymin.min(px.y);
        ymax = ymax.max(px.y);
    }
    // pixel i is covered when its center i + 0.5 lies in [min, max]
    let lo = |v: f64| (v - 0.5).ceil().max(0.0);
    let hi = |v: f64, n: u32| (v - 0.5).floor().min(n as f64 - 1.0);
    let (x0, x1) = (lo(xmin), hi(xmax, camera.width));
    let (y0, y1) = (lo(ymin), hi(ymax, camera.height));
    if !(x0 <= x1 && y0 <= y1) {
        return Footprint::Culled;
    }
    Footprint::Rect(PixelRect { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 })
}

fn splats(camera: &Camera, posed: &[PosedSurfel]) -> Vec<Splat> {
    posed.iter().map(|s| Splat::new(camera, s)).collect()
}

fn bin(camera: &Camera, splats: &[Splat], cutoff: Option<f64>) -> TileBins {
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let tiles_y = camera.height.div_ceil(TILE_SIZE);
    let n_tiles = (tiles_x * tiles_y) as usize;
    let mut lists = vec![Vec::new(); n_tiles];
    let Some(cutoff) = cutoff else {
        let all: Vec<u32> = (0..splats.len() as u32).collect();
        return TileBins { tiles_x, tiles_y, lists: vec![all; n_tiles], rects: vec![None; splats.len()] };
    };
    let radius = (-2.0 * cutoff.ln()).sqrt();
    let mut rects = Vec::with_capacity(splats.len());
    for (id, s) in splats.iter().enumerate() {
        match footprint(camera, s, radius) {
            Footprint::Culled => rects.push(Some(PixelRect { x0: 1, y0: 1, x1: 0, y1: 0 })),
            Footprint::Unbounded => {
                rects.push(None);
                lists.iter_mut().for_each(|l| l.push(id as u32));
            }
            Footprint::Rect(r) => {
                rects.push(Some(r));
                for ty in r.y0 / TILE_SIZE..=r.y1 / TILE_SIZE {
                    for tx in r.x0 / TILE_SIZE..=r.x1 / TILE_SIZE {
                        lists[(ty * tiles_x + tx) as usize].push(id as u32);
                    }
                }
            }
        }
    }
    TileBins { tiles_x, tiles_y, lists, rects }
}

/// Assign posed surfels to the tiles their cutoff-radius footprint overlaps.
/// With `cutoff = None` every surfel is assigned to every tile.
pub fn cull_and_bin(camera: &Camera, posed: &[PosedSurfel], cutoff: Option<f64>) -> TileBins {
    bin(camera, &splats(camera, posed), cutoff)
}

fn sort_fragments(frags: &mut [Fragment]) {
    frags.sort_unstable_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
}

#[inline]
fn fragment(splat: &Splat, id: u32, d: &Vector3<f64>, near: f64) -> Option<Fragment> {
    let hit = splat.intersect(d, near)?;
    Some(Fragment {
        id,
        depth: hit.depth,
        u: hit.u,
        v: hit.v,
        kernel: crate::surfel::kernel(hit.u, hit.v),
        opacity: splat.opacity,
    })
}

/// Depth-sorted fragments of pixel `(x, y)` over the candidate surfels.
#[allow(clippy::too_many_arguments)]
fn pixel_fragments(
    camera: &Camera,
    splats: &[Splat],
    candidates: &[u32],
    rects: &[Option<PixelRect>],
    cutoff: Option<f64>,
    x: u32,
    y: u32,
    out: &mut Vec<Fragment>,
) {
    out.clear();
    let d = camera.ray(x, y);
    for &id in candidates {
        if let (Some(_), Some(r)) = (cutoff, rects.get(id as usize).copied().flatten()) {
            if !r.contains(x, y) {
                continue;
            }
        }
        if let Some(f) = fragment(&splats[id as usize], id, &d, camera.near) {
            if cutoff.is_some_and(|c| f.kernel < c) {
                continue;
            }
            out.push(f);
        }
    }
    sort_fragments(out);
}

/// Per-pixel compositing result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub alpha: f64,
    /// Number of fragments blended before termination.
    pub used: usize,
    pub terminated: bool,
}

/// Front-to-back compositing of depth-sorted fragments:
/// `c = Σ c_i a_i Π_{j<i} (1 - a_j) + T_final · background`, `a_i = α_i G_i`.
pub fn composite_pixel(
    fragments: &[Fragment],
    colors: &[[f64; 3]],
    background: [f64; 3],
    early_termination: bool,
) -> Composite {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    let mut used = 0;
    let mut terminated = false;
    for f in fragments {
        let a = f.alpha();
        let w = a * t;
        let c = &colors[f.id as usize];
        for k in 0..3 {
            rgb[k] += c[k] * w;
        }
        t *= 1.0 - a;
        used += 1;
        if early_termination && t < TRANSMITTANCE_MIN {
            terminated = true;
            break;
        }
    }
    for k in 0..3 {
        rgb[k] += background[k] * t;
    }
    Composite { rgb, alpha: 1.0 - t, used, terminated }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Surfels skipped because their scaled axes are degenerate.
    pub degenerate: usize,
    pub early_terminated: usize,
    pub fragments: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub alpha: Plane,
    pub bins: TileBins,
    pub stats: RenderStats,
}

fn tile_pixels(camera: &Camera, bins: &TileBins, tile: usize) -> impl Iterator<Item = (u32, u32)> {
    let tx = tile as u32 % bins.tiles_x;
    let ty = tile as u32 / bins.tiles_x;
    let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
    let (x1, y1) = ((x0 + TILE_SIZE).min(camera.width), (y0 + TILE_SIZE).min(camera.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Render posed surfels. Tiles are processed in parallel; each pixel depends
/// only on its own fragment list, so the output does not depend on the
/// thread count.
pub fn render(camera: &Camera, posed: &[PosedSurfel], colors: &[[f64; 3]], opts: &RenderOptions) -> RenderOutput {
    assert_eq!(posed.len(), colors.len(), "one color per surfel");
    let splats = splats(camera, posed);
    let bins = bin(camera, &splats, opts.kernel_cutoff);
    let per_tile: Vec<(Vec<(u32, u32, Composite)>, usize)> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let mut frags = Vec::new();
            let mut count = 0;
            let px = tile_pixels(camera, &bins, tile)
                .map(|(x, y)| {
                    pixel_fragments(camera, &splats, &bins.lists[tile], &bins.rects, opts.kernel_cutoff, x, y, &mut frags);
                    count += frags.len();
                    (x, y, composite_pixel(&frags, colors, opts.background, opts.early_termination))
                })
                .collect();
            (px, count)
        })
        .collect();
    let mut image = Image::new(camera.width, camera.height);
    let mut alpha = Plane::new(camera.width, camera.height);
    let mut stats = RenderStats { degenerate: splats.iter().filter(|s| !s.valid).count(), ..Default::default() };
    for (pixels, count) in per_tile {
        stats.fragments += count;
        for (x, y, c) in pixels {
            image.set_pixel(x, y, c.rgb);
            alpha.data[(y * camera.width + x) as usize] = c.alpha;
            stats.early_terminated += c.terminated as usize;
        }
    }
    RenderOutput { image, alpha, bins, stats }
}

/// Reference renderer: every pixel against every surfel, full sort, no
/// cutoff, no culling, no early termination.
pub fn render_oracle(camera: &Camera, posed: &[PosedSurfel], colors: &[[f64; 3]], background: [f64; 3]) -> (Image, Plane) {
    let splats = splats(camera, posed);
    let rows: Vec<Vec<Composite>> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            (0..camera.width)
                .map(|x| {
                    let d = camera.ray(x, y);
                    let mut frags: Vec<Fragment> = splats
                        .iter()
                        .enumerate()
                        .filter_map(|(id, s)| fragment(s, id as u32, &d, camera.near))
                        .collect();
                    sort_fragments(&mut frags);
                    composite_pixel(&frags, colors, background, false)
                })
                .collect()
        })
        .collect();
    let mut image = Image::new(camera.width, camera.height);
    let mut alpha = Plane::new(camera.width, camera.height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, c) in row.into_iter().enumerate() {
            image.set_pixel(x as u32, y as u32, c.rgb);
            alpha.data[y * camera.width as usize + x] = c.alpha;
        }
    }
    (image, alpha)
}

/// Fast and exact render of one scene measured against [`render_oracle`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleComparison {
    /// Exact mode reproduced the oracle image and alpha bit for bit.
    pub bitwise_equal: bool,
    /// Largest per-channel deviation of the fast path from the oracle.
    pub max_fast_deviation: f64,
}

pub fn compare_with_oracle(camera: &Camera, posed: &[PosedSurfel], colors: &[[f64; 3]]) -> OracleComparison {
    let (img, alpha) = render_oracle(camera, posed, colors, [0.0; 3]);
    let exact = render(camera, posed, colors, &RenderOptions::exact());
    let fast = render(camera, posed, colors, &RenderOptions::fast());
    let bitwise_equal = exact.image.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits())
        && exact.alpha.data.iter().zip(&alpha.data).all(|(a, b)| a.to_bits() == b.to_bits());
    let max_fast_deviation = fast.image.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    OracleComparison { bitwise_equal, max_fast_deviation }
}

/// Gradient with respect to one posed surfel (world space, post-sigmoid opacity).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PosedGrad {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl PosedGrad {
    fn add(&mut self, o: &PosedGrad) {
        self.center += o.center;
        self.axis_u += o.axis_u;
        self.axis_v += o.axis_v;
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == PosedGrad::default()
    }
}

/// Backpropagate image and alpha gradients to the posed surfels.
///
/// Fragment lists are recomputed with the same binning as the forward pass.
/// Per-tile partial gradients are reduced in tile order, so the result is
/// independent of scheduling.
pub fn render_backward(
    camera: &Camera,
    posed: &[PosedSurfel],
    colors: &[[f64; 3]],
    opts: &RenderOptions,
    forward: &RenderOutput,
    d_image: &Image,
    d_alpha: &Plane,
) -> Result<Vec<PosedGrad>> {
    if !d_image.data.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient { class: "image" });
    }
    if !d_alpha.data.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient { class: "alpha" });
    }
    let splats = splats(camera, posed);
    let bins = &forward.bins;
    let partials: Vec<Vec<PosedGrad>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &bins.lists[tile];
            let mut local = vec![PosedGrad::default(); list.len()];
            let mut slot = std::collections::HashMap::with_capacity(list.len());
            for (k, id) in list.iter().enumerate() {
                slot.insert(*id, k);
            }
            let mut frags = Vec::new();
            let mut trans = Vec::new();
            for (x, y) in tile_pixels(camera, bins, tile) {
                let pix = (y * camera.width + x) as usize;
                let g_c = [d_image.data[3 * pix], d_image.data[3 * pix + 1], d_image.data[3 * pix + 2]];
                let g_a = d_alpha.data[pix];
                if g_c == [0.0; 3] && g_a == 0.0 {
                    continue;
                }
                pixel_fragments(camera, &splats, list, &bins.rects, opts.kernel_cutoff, x, y, &mut frags);
                // prefix transmittance, truncated exactly as in the forward pass
                trans.clear();
                let mut t = 1.0;
                for f in &frags {
                    trans.push(t);
                    t *= 1.0 - f.alpha();
                    if opts.early_termination && t < TRANSMITTANCE_MIN {
                        break;
                    }
                }
                let d = camera.ray(x, y);
                let mut suffix_color = opts.background;
                let mut suffix_t = 1.0;
                for i in (0..trans.len()).rev() {
                    let f = &frags[i];
                    let a = f.alpha();
                    let c = &colors[f.id as usize];
                    let ti = trans[i];
                    let mut g_a_i = g_a * ti * suffix_t;
                    for k in 0..3 {
                        g_a_i += g_c[k] * ti * (c[k] - suffix_color[k]);
                        suffix_color[k] = c[k] * a + (1.0 - a) * suffix_color[k];
                    }
                    suffix_t *= 1.0 - a;

                    let acc = &mut local[slot[&f.id]];
                    for k in 0..3 {
                        acc.color[k] += g_c[k] * a * ti;
                    }
                    acc.opacity += g_a_i * f.kernel;
                    let g_kernel = g_a_i * f.opacity;
                    let gu = -g_kernel * f.u * f.kernel;
                    let gv = -g_kernel * f.v * f.kernel;
                    // implicit differentiation of [au av -d](u v t)ᵀ = -p
                    let s = &splats[f.id as usize];
                    let lambda = (s.av.cross(&d) * gu + d.cross(&s.au) * gv) / s.n.dot(&d);
                    acc.center -= lambda;
                    acc.axis_u -= lambda * f.u;
                    acc.axis_v -= lambda * f.v;
                }
            }
            local
        })
        .collect();
    let mut grads = vec![PosedGrad::default(); posed.len()];
    for (tile, local) in partials.iter().enumerate() {
        for (k, id) in bins.lists[tile].iter().enumerate() {
            grads[*id as usize].add(&local[k]);
        }
    }
    let rt = camera.rotation.transpose();
    for g in &mut grads {
        g.center = rt * g.center;
        g.axis_u = rt * g.axis_u;
        g.axis_v = rt * g.axis_v;
    }
    Ok(grads)
}
