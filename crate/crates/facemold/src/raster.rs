//! Differentiable rendering layer: z-buffer depth rasterization with
//! barycentric interpolation, attribute rendering, visibility masking and the
//! backward pass from pixels to vertices to the representation.
//!
//! Screen mapping: camera coordinates are offsets from the image center, so a
//! pixel `(ix, iy)` has center `(ix + 0.5 - W/2, iy + 0.5 - H/2)` in camera
//! units. Coverage uses pixel-center sampling with a top-left fill rule, so
//! a pixel whose center lies exactly on a shared edge belongs to exactly one
//! triangle. Occlusion picks the smallest interpolated depth; exact depth
//! ties go to the lowest triangle index. Both rules make the output
//! bit-identical across runs and thread counts.
//!
//! Backward pass: barycentric weights are treated as constants, so pixel
//! gradients reach only the z coordinates of the vertices of the covering
//! triangle, weighted by the corresponding barycentric coordinate, and hidden
//! vertices receive exactly zero. Derivatives of the barycentric weights with
//! respect to screen-space vertex positions are intentionally not taken; as a
//! direct consequence the backward pass through the camera transform carries
//! no gradient onto the in-plane translation or the scale factor.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::MorphableModel;
use crate::pose::{camera_transform, CameraMesh, Representation, RepresentationGrad};

/// Plain intensity or scalar-field grid, row major, no validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        GrayImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Per-pixel depth with a validity mask. Invalid pixels hold 0.0 internally;
/// export substitutes a background fill value.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Min and max over valid pixels, if any.
    pub fn depth_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for (z, v) in self.depth.iter().zip(&self.valid) {
            if *v {
                lo = lo.min(*z);
                hi = hi.max(*z);
                any = true;
            }
        }
        any.then_some((lo, hi))
    }

    /// Default background fill for export: max valid depth plus 10% of the
    /// valid range (0 when the map is empty or flat).
    pub fn default_fill(&self) -> f64 {
        match self.depth_range() {
            Some((lo, hi)) => hi + 0.1 * (hi - lo),
            None => 0.0,
        }
    }
}

const NO_TRIANGLE: u32 = u32::MAX;

/// Per-pixel triangle assignment and barycentric weights, the state the
/// backward pass and attribute rendering replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterCache {
    pub width: usize,
    pub height: usize,
    triangle_count: usize,
    tri: Vec<u32>,
    bary: Vec<[f64; 3]>,
}

impl RasterCache {
    #[inline]
    pub fn triangle_at(&self, x: usize, y: usize) -> Option<u32> {
        let t = self.tri[y * self.width + x];
        (t != NO_TRIANGLE).then_some(t)
    }

    #[inline]
    pub fn bary_at(&self, x: usize, y: usize) -> [f64; 3] {
        self.bary[y * self.width + x]
    }

    pub fn triangle_count(&self) -> usize {
        self.triangle_count
    }

    /// True when both caches assign every pixel the same triangle with the
    /// same barycentric weights. Gradient-check harnesses use this to detect
    /// finite-difference probes that invalidate the fixed-barycentric
    /// assumption of the backward pass.
    pub fn same_assignment(&self, other: &RasterCache) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.tri == other.tri
            && self.bary == other.bary
    }

    fn check_topology(&self, triangles: &[[u32; 3]]) -> Result<()> {
        if triangles.len() != self.triangle_count {
            return Err(Error::TopologyMismatch {
                cache_triangles: self.triangle_count,
                mesh_triangles: triangles.len(),
            });
        }
        Ok(())
    }
}

/// Three-channel per-pixel field with a validity mask; invalid pixels are
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

/// Single-channel per-pixel field with a validity mask; invalid pixels are
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Barycentric blend anchored at the first vertex. Algebraically equal to
/// the plain weighted sum, but exact for constant attributes: the weights
/// only multiply differences.
#[inline]
fn blend3(lambda: [f64; 3], values: [f64; 3]) -> f64 {
    values[0] + lambda[1] * (values[1] - values[0]) + lambda[2] * (values[2] - values[0])
}

struct TriSetup {
    id: u32,
    /// Screen-space corners in positive-orientation order.
    q: [[f64; 2]; 3],
    /// Depth values in original vertex order.
    z: [f64; 3],
    /// Maps ordered barycentric slots back to original vertex slots.
    perm: [usize; 3],
    area2: f64,
    /// Pixel-index bounding box, inclusive.
    bx0: usize,
    bx1: usize,
    by0: usize,
    by1: usize,
}

#[inline]
fn is_top_left(e: [f64; 2]) -> bool {
    e[1] < 0.0 || (e[1] == 0.0 && e[0] > 0.0)
}

fn triangle_setups(mesh: &CameraMesh, width: usize, height: usize) -> Vec<TriSetup> {
    let half_w = width as f64 / 2.0;
    let half_h = height as f64 / 2.0;
    let mut setups = Vec::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let v: Vec<[f64; 3]> = tri.iter().map(|&i| mesh.vertex(i as usize)).collect();
        let s: Vec<[f64; 2]> = v
            .iter()
            .map(|p| [p[0] + half_w, p[1] + half_h])
            .collect();
        let area2 =
            (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[1][1] - s[0][1]) * (s[2][0] - s[0][0]);
        if area2 == 0.0 || !area2.is_finite() {
            continue;
        }
        let (q, perm, area2) = if area2 > 0.0 {
            ([s[0], s[1], s[2]], [0usize, 1, 2], area2)
        } else {
            // Reverse winding; ordered slots 1 and 2 swap places.
            ([s[0], s[2], s[1]], [0usize, 2, 1], -area2)
        };
        let minx = q.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let maxx = q.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let miny = q.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let maxy = q.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let bx0 = (minx - 0.5).ceil().max(0.0);
        let bx1 = (maxx - 0.5).floor().min(width as f64 - 1.0);
        let by0 = (miny - 0.5).ceil().max(0.0);
        let by1 = (maxy - 0.5).floor().min(height as f64 - 1.0);
        if bx0 > bx1 || by0 > by1 {
            continue;
        }
        setups.push(TriSetup {
            id: t as u32,
            q,
            z: [v[0][2], v[1][2], v[2][2]],
            perm,
            area2,
            bx0: bx0 as usize,
            bx1: bx1 as usize,
            by0: by0 as usize,
            by1: by1 as usize,
        });
    }
    setups
}

/// Coverage and barycentric evaluation at one pixel center. Returns weights
/// in original vertex order.
#[inline]
fn sample(setup: &TriSetup, px: f64, py: f64) -> Option<[f64; 3]> {
    let mut mu = [0.0; 3];
    for k in 0..3 {
        let o = setup.q[(k + 1) % 3];
        let hd = setup.q[(k + 2) % 3];
        let e = [hd[0] - o[0], hd[1] - o[1]];
        let w = e[0] * (py - o[1]) - e[1] * (px - o[0]);
        if w < 0.0 || (w == 0.0 && !is_top_left(e)) {
            return None;
        }
        mu[k] = w / setup.area2;
    }
    let mut lambda = [0.0; 3];
    for k in 0..3 {
        lambda[setup.perm[k]] = mu[k];
    }
    Some(lambda)
}

const BAND_ROWS: usize = 16;

/// Z-buffer rasterization. Every covered pixel receives the barycentric
/// blend of the covering triangle's depth values; uncovered pixels stay
/// invalid. Work is split over fixed horizontal bands, so the result does not
/// depend on the number of worker threads.
pub fn rasterize(mesh: &CameraMesh, width: usize, height: usize) -> (DepthMap, RasterCache) {
    assert!(width >= 1 && height >= 1, "raster target must be nonempty");
    let setups = triangle_setups(mesh, width, height);

    let mut depth = vec![0.0f64; width * height];
    let mut valid = vec![false; width * height];
    let mut tri = vec![NO_TRIANGLE; width * height];
    let mut bary = vec![[0.0f64; 3]; width * height];

    depth
        .par_chunks_mut(BAND_ROWS * width)
        .zip(valid.par_chunks_mut(BAND_ROWS * width))
        .zip(tri.par_chunks_mut(BAND_ROWS * width))
        .zip(bary.par_chunks_mut(BAND_ROWS * width))
        .enumerate()
        .for_each(|(band, (((depth, valid), tri), bary))| {
            let y_base = band * BAND_ROWS;
            let rows = depth.len() / width;
            for setup in &setups {
                let y0 = setup.by0.max(y_base);
                let y1 = setup.by1.min(y_base + rows - 1);
                if y0 > y1 {
                    continue;
                }
                for y in y0..=y1 {
                    let py = y as f64 + 0.5;
                    let row = (y - y_base) * width;
                    for x in setup.bx0..=setup.bx1 {
                        let px = x as f64 + 0.5;
                        if let Some(lambda) = sample(setup, px, py) {
                            let z = blend3(lambda, setup.z);
                            let i = row + x;
                            // Strictly-closer wins; triangles are visited in
                            // ascending index order, so exact ties keep the
                            // lowest index.
                            if !valid[i] || z < depth[i] {
                                depth[i] = z;
                                valid[i] = true;
                                tri[i] = setup.id;
                                bary[i] = lambda;
                            }
                        }
                    }
                }
            }
        });

    (
        DepthMap {
            width,
            height,
            depth,
            valid,
        },
        RasterCache {
            width,
            height,
            triangle_count: mesh.triangles.len(),
            tri,
            bary,
        },
    )
}

/// Barycentric blend of a per-vertex scalar attribute over covered pixels.
pub fn rasterize_scalar_attribute(
    cache: &RasterCache,
    triangles: &[[u32; 3]],
    values: &[f64],
) -> Result<ScalarMap> {
    cache.check_topology(triangles)?;
    let n = values.len();
    let mut data = vec![0.0; cache.width * cache.height];
    let mut valid = vec![false; cache.width * cache.height];
    for i in 0..data.len() {
        let t = cache.tri[i];
        if t == NO_TRIANGLE {
            continue;
        }
        let [a, b, c] = triangles[t as usize];
        let (a, b, c) = (a as usize, b as usize, c as usize);
        if a >= n || b >= n || c >= n {
            return Err(Error::DimensionMismatch {
                what: "scalar attribute",
                expected: a.max(b).max(c) + 1,
                got: n,
            });
        }
        data[i] = blend3(cache.bary[i], [values[a], values[b], values[c]]);
        valid[i] = true;
    }
    Ok(ScalarMap {
        width: cache.width,
        height: cache.height,
        data,
        valid,
    })
}

/// Barycentric blend of an interleaved per-vertex 3-vector attribute.
pub fn rasterize_vector_attribute(
    cache: &RasterCache,
    triangles: &[[u32; 3]],
    values: &[f64],
) -> Result<ChannelMap> {
    cache.check_topology(triangles)?;
    if values.len() % 3 != 0 {
        return Err(Error::DimensionMismatch {
            what: "vector attribute",
            expected: values.len() / 3 * 3,
            got: values.len(),
        });
    }
    let n = values.len() / 3;
    let mut data = vec![[0.0; 3]; cache.width * cache.height];
    let mut valid = vec![false; cache.width * cache.height];
    for i in 0..data.len() {
        let t = cache.tri[i];
        if t == NO_TRIANGLE {
            continue;
        }
        let [a, b, c] = triangles[t as usize];
        let (a, b, c) = (a as usize, b as usize, c as usize);
        if a >= n || b >= n || c >= n {
            return Err(Error::DimensionMismatch {
                what: "vector attribute",
                expected: 3 * (a.max(b).max(c) + 1),
                got: values.len(),
            });
        }
        for ch in 0..3 {
            data[i][ch] = blend3(
                cache.bary[i],
                [values[3 * a + ch], values[3 * b + ch], values[3 * c + ch]],
            );
        }
        valid[i] = true;
    }
    Ok(ChannelMap {
        width: cache.width,
        height: cache.height,
        data,
        valid,
    })
}

/// Coordinate-code feedback channel: renders the normalized mean coordinates
/// of the surface point each pixel sees. A convex blend of [0, 1] data can
/// stray by one rounding step, so channels are clamped back onto [0, 1].
pub fn render_pncc(model: &MorphableModel, cache: &RasterCache) -> Result<ChannelMap> {
    let mut map =
        rasterize_vector_attribute(cache, &model.triangles, model.normalized_mean.as_slice())?;
    for px in &mut map.data {
        for c in px {
            *c = c.clamp(0.0, 1.0);
        }
    }
    Ok(map)
}

/// Per-vertex normals in camera space: area-weighted sum of adjacent face
/// normals, each oriented with a nonnegative z component, normalized to unit
/// length. A vertex whose adjacent triangles are all degenerate falls back
/// to (0, 0, 1).
pub fn vertex_normals(mesh: &CameraMesh) -> Vec<[f64; 3]> {
    let n = mesh.vertex_count();
    let mut acc = vec![[0.0f64; 3]; n];
    for tri in &mesh.triangles {
        let p0 = mesh.vertex(tri[0] as usize);
        let p1 = mesh.vertex(tri[1] as usize);
        let p2 = mesh.vertex(tri[2] as usize);
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let mut fnorm = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        if fnorm[2] < 0.0 {
            for c in &mut fnorm {
                *c = -*c;
            }
        }
        for &i in tri {
            for c in 0..3 {
                acc[i as usize][c] += fnorm[c];
            }
        }
    }
    for a in &mut acc {
        let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        if norm > 1e-12 {
            for c in a.iter_mut() {
                *c /= norm;
            }
        } else {
            *a = [0.0, 0.0, 1.0];
        }
    }
    acc
}

/// Normal-map feedback channel: barycentric blend of unit vertex normals.
/// Blended magnitudes are at most 1.
pub fn render_normal_map(mesh: &CameraMesh, cache: &RasterCache) -> Result<ChannelMap> {
    let normals = vertex_normals(mesh);
    let mut flat = Vec::with_capacity(3 * normals.len());
    for n in &normals {
        flat.extend_from_slice(n);
    }
    rasterize_vector_attribute(cache, &mesh.triangles, &flat)
}

/// Zeroes image pixels that are invalid in the depth map.
pub fn mask_image(image: &GrayImage, depth: &DepthMap) -> Result<GrayImage> {
    if image.width != depth.width || image.height != depth.height {
        return Err(Error::ShapeMismatch {
            what: "image vs depth mask",
            expected_w: depth.width,
            expected_h: depth.height,
            got_w: image.width,
            got_h: image.height,
        });
    }
    let data = image
        .data
        .iter()
        .zip(&depth.valid)
        .map(|(v, m)| if *m { *v } else { 0.0 })
        .collect();
    Ok(GrayImage {
        width: image.width,
        height: image.height,
        data,
    })
}

/// Pulls a depth-map gradient back to per-vertex z gradients: each covered
/// pixel sends its gradient to the three vertices of its triangle, weighted
/// by the barycentric coordinates. Vertices covering no pixel get exactly
/// zero. Accumulation runs in row-major pixel order, so the result is
/// deterministic.
pub fn rasterize_vjp(
    cache: &RasterCache,
    mesh: &CameraMesh,
    grad_depth: &GrayImage,
) -> Result<Vec<f64>> {
    cache.check_topology(&mesh.triangles)?;
    if grad_depth.width != cache.width || grad_depth.height != cache.height {
        return Err(Error::ShapeMismatch {
            what: "depth gradient vs cache",
            expected_w: cache.width,
            expected_h: cache.height,
            got_w: grad_depth.width,
            got_h: grad_depth.height,
        });
    }
    let mut out = vec![0.0; mesh.vertex_count()];
    for i in 0..grad_depth.data.len() {
        let t = cache.tri[i];
        if t == NO_TRIANGLE {
            continue;
        }
        let g = grad_depth.data[i];
        if g == 0.0 {
            continue;
        }
        let tri = mesh.triangles[t as usize];
        let lambda = cache.bary[i];
        for k in 0..3 {
            out[tri[k] as usize] += g * lambda[k];
        }
    }
    Ok(out)
}

/// Backward pass from a depth-map gradient to the representation, reusing an
/// existing forward cache. Only vertex z rows feed the depth map; vertex x
/// and y receive no gradient because barycentric weights are fixed.
pub fn backward_from_cache(
    model: &MorphableModel,
    rep: &Representation,
    mesh: &CameraMesh,
    cache: &RasterCache,
    grad_depth: &GrayImage,
) -> Result<RepresentationGrad> {
    let gz = rasterize_vjp(cache, mesh, grad_depth)?;
    let mut grad_vertices = vec![0.0; 3 * model.vertex_count];
    for (i, g) in gz.iter().enumerate() {
        grad_vertices[3 * i + 2] = *g;
    }
    crate::pose::camera_transform_vjp(model, rep, &grad_vertices)
}

/// Full rendering-layer backward pass: re-renders at `rep` and propagates the
/// given depth-map gradient back to the representation.
pub fn render_layer_backward(
    model: &MorphableModel,
    rep: &Representation,
    grad_depth: &GrayImage,
) -> Result<RepresentationGrad> {
    let mesh = camera_transform(model, rep)?;
    let (_, cache) = rasterize(&mesh, grad_depth.width, grad_depth.height);
    backward_from_cache(model, rep, &mesh, &cache, grad_depth)
}
