//! Procedural toy morphable model and synthetic scene generation: images with
//! exact ground-truth depth, representation, lighting and texture.
//!
//! The toy mean shape is a smooth face-like height field (a broad elliptical
//! dome with fixed nose and brow bumps) triangulated on a regular grid. Model
//! units are chosen so that at nominal scale 1.0 one unit is one pixel, which
//! keeps depth slopes in a face-like range for the shading model. The
//! geometry bases are orthonormalized smooth random height-displacement
//! fields, so geometry coefficients move vertices only along z.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::fit::interpolate_representation;
use crate::formats;
use crate::model::{MorphableModel, TextureCoeffs};
use crate::pose::{camera_transform, Pose, Representation};
use crate::raster::{rasterize, rasterize_scalar_attribute, render_normal_map, DepthMap, GrayImage};
use crate::sfs::{normals_from_depth, sh_field_from_normals, shade, Lighting};

/// Toy model construction parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyModelConfig {
    /// Vertices per grid side; the mesh has `grid * grid` vertices.
    pub grid: usize,
    pub d_id: usize,
    pub d_exp: usize,
    pub d_tex: usize,
    /// Half-width of the grid in model units. 22 fills a 64x64 image at
    /// nominal scale.
    pub extent: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            grid: 30,
            d_id: 8,
            d_exp: 4,
            d_tex: 10,
            extent: 22.0,
        }
    }
}

/// Face-like height above the base plane at normalized coordinates
/// `(u, v)` in [-1, 1]^2, in units of the extent.
fn face_height(u: f64, v: f64) -> f64 {
    let dome = 0.50 * (-(u * u / 0.55 + v * v / 0.72)).exp();
    let nose = 0.16 * (-(u * u / 0.018 + (v - 0.12) * (v - 0.12) / 0.05)).exp();
    let brow_r = 0.05 * (-((u - 0.28) * (u - 0.28) / 0.03 + (v + 0.30) * (v + 0.30) / 0.012)).exp();
    let brow_l = 0.05 * (-((u + 0.28) * (u + 0.28) / 0.03 + (v + 0.30) * (v + 0.30) / 0.012)).exp();
    dome + nose + brow_r + brow_l
}

/// Smooth random scalar field: a small mixture of Gaussians with random
/// centers, widths and signed amplitudes.
fn random_field(rng: &mut ChaCha12Rng, points: &[(f64, f64)]) -> Vec<f64> {
    const BLOBS: usize = 6;
    let mut blobs = Vec::with_capacity(BLOBS);
    for _ in 0..BLOBS {
        let amp: f64 = rng.sample(StandardNormal);
        let cx = rng.gen_range(-0.75..0.75);
        let cy = rng.gen_range(-0.75..0.75);
        let sigma = rng.gen_range(0.18..0.45);
        blobs.push((amp, cx, cy, 2.0 * sigma * sigma));
    }
    points
        .iter()
        .map(|&(u, v)| {
            blobs
                .iter()
                .map(|&(amp, cx, cy, s2)| {
                    amp * (-((u - cx) * (u - cx) + (v - cy) * (v - cy)) / s2).exp()
                })
                .sum()
        })
        .collect()
}

/// Orthonormalizes the columns of a matrix in place with two passes of
/// modified Gram-Schmidt. Returns false if a column degenerates.
fn orthonormalize(m: &mut DMatrix<f64>) -> bool {
    for _ in 0..2 {
        for k in 0..m.ncols() {
            for j in 0..k {
                let proj = m.column(k).dot(&m.column(j));
                let prev = m.column(j).clone_owned();
                m.column_mut(k).axpy(-proj, &prev, 1.0);
            }
            let norm = m.column(k).norm();
            if norm < 1e-8 {
                return false;
            }
            m.column_mut(k).scale_mut(1.0 / norm);
        }
    }
    true
}

/// Builds a deterministic toy morphable model.
///
/// Panics if `grid < 8` or any basis dimension is zero.
pub fn generate_toy_model(seed: u64, cfg: &ToyModelConfig) -> MorphableModel {
    assert!(cfg.grid >= 8, "toy model grid must be at least 8x8");
    assert!(
        cfg.d_id >= 1 && cfg.d_exp >= 1 && cfg.d_tex >= 1,
        "basis dimensions must be at least 1"
    );
    let n = cfg.grid;
    let e = cfg.extent;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut points = Vec::with_capacity(n * n);
    let mut mean_shape = DVector::zeros(3 * n * n);
    for j in 0..n {
        for i in 0..n {
            let u = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            let v = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
            points.push((u, v));
            let idx = j * n + i;
            mean_shape[3 * idx] = u * e;
            mean_shape[3 * idx + 1] = v * e;
            // Bulge toward the camera: higher features get smaller depth.
            mean_shape[3 * idx + 2] = e * (0.70 - face_height(u, v));
        }
    }

    let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = (j * n + i) as u32;
            let b = (j * n + i + 1) as u32;
            let c = ((j + 1) * n + i) as u32;
            let d = ((j + 1) * n + i + 1) as u32;
            triangles.push([a, b, c]);
            triangles.push([b, d, c]);
        }
    }

    // Geometry bases: joint orthonormalization keeps identity and expression
    // columns mutually orthogonal, so the stacked basis has full column rank.
    let d_geo = cfg.d_id + cfg.d_exp;
    let mut geo = DMatrix::zeros(3 * n * n, d_geo);
    loop {
        for k in 0..d_geo {
            let field = random_field(&mut rng, &points);
            for (vtx, value) in field.iter().enumerate() {
                geo[(3 * vtx + 2, k)] = *value;
            }
        }
        if orthonormalize(&mut geo) {
            break;
        }
    }
    let id_basis = geo.columns(0, cfg.d_id).clone_owned();
    let exp_basis = geo.columns(cfg.d_id, cfg.d_exp).clone_owned();

    let mut tex = DMatrix::zeros(n * n, cfg.d_tex);
    loop {
        for k in 0..cfg.d_tex {
            let field = random_field(&mut rng, &points);
            for (vtx, value) in field.iter().enumerate() {
                tex[(vtx, k)] = *value;
            }
        }
        if orthonormalize(&mut tex) {
            break;
        }
    }

    let mean_texture = DVector::from_element(n * n, 0.6);
    MorphableModel::new(triangles, mean_shape, id_basis, exp_basis, mean_texture, tex)
        .expect("toy model construction is valid by design")
}

/// Sampling ranges for random representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRanges {
    /// Angles uniform in [-angle, angle] radians.
    pub angle: f64,
    /// Translations uniform in [-translation, translation] pixels.
    pub translation: f64,
    /// Scale uniform in [scale_lo, scale_hi] times the nominal scale.
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub nominal_scale: f64,
}

impl Default for PoseRanges {
    fn default() -> Self {
        PoseRanges {
            angle: 0.35,
            translation: 10.0,
            scale_lo: 0.8,
            scale_hi: 1.2,
            nominal_scale: 1.0,
        }
    }
}

fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a random representation: Gaussian geometry coefficients, uniform
/// pose within the configured ranges.
pub fn sample_representation(
    rng: &mut ChaCha12Rng,
    model: &MorphableModel,
    ranges: &PoseRanges,
    coeff_sigma: f64,
) -> Representation {
    let id = DVector::from_fn(model.d_id(), |_, _| {
        coeff_sigma * rng.sample::<f64, _>(StandardNormal)
    });
    let exp = DVector::from_fn(model.d_exp(), |_, _| {
        coeff_sigma * rng.sample::<f64, _>(StandardNormal)
    });
    let pose = Pose {
        yaw: uniform(rng, -ranges.angle, ranges.angle),
        pitch: uniform(rng, -ranges.angle, ranges.angle),
        roll: uniform(rng, -ranges.angle, ranges.angle),
        tx: uniform(rng, -ranges.translation, ranges.translation),
        ty: uniform(rng, -ranges.translation, ranges.translation),
        scale: ranges.nominal_scale * uniform(rng, ranges.scale_lo, ranges.scale_hi),
    };
    Representation {
        geometry: crate::model::GeometryCoeffs { id, exp },
        pose,
    }
}

/// Draws scene lighting: a moderate ambient term plus a directional term
/// tilted toward the camera.
pub fn sample_lighting(rng: &mut ChaCha12Rng) -> Lighting {
    let ambient = rng.gen_range(0.55..0.75);
    let dx: f64 = rng.gen_range(-0.7..0.7);
    let dy: f64 = rng.gen_range(-0.7..0.7);
    let dz: f64 = rng.gen_range(0.4..0.9);
    let norm = (dx * dx + dy * dy + dz * dz).sqrt();
    let magnitude = rng.gen_range(0.2..0.4);
    Lighting {
        l: [
            ambient,
            magnitude * dx / norm,
            magnitude * dy / norm,
            magnitude * dz / norm,
        ],
    }
}

/// Which normals shade a synthetic scene: interpolated mesh vertex normals
/// (the default) or normals differentiated from the rendered depth map. The
/// two differ by discretization; depth-sourced shading is exactly consistent
/// with the recovery model of the shape-from-shading criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalSource {
    Mesh,
    Depth,
}

/// A rendered synthetic scene with every ground truth recorded.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub image: GrayImage,
    pub depth_gt: DepthMap,
    pub rep_gt: Representation,
    pub lighting_gt: Lighting,
    pub texcoeffs_gt: TextureCoeffs,
    pub background_value: f64,
}

/// Renders a scene: depth and coverage from the rasterizer, image from the
/// shading model on coverage and the background value elsewhere.
pub fn render_scene(
    model: &MorphableModel,
    rep: &Representation,
    lighting: &Lighting,
    texcoeffs: &TextureCoeffs,
    width: usize,
    height: usize,
    background: f64,
    normal_source: NormalSource,
) -> Result<SynthScene> {
    let mesh = camera_transform(model, rep)?;
    let (depth, cache) = rasterize(&mesh, width, height);
    let texture = model.synthesize_texture(texcoeffs)?;
    let albedo = rasterize_scalar_attribute(&cache, &model.triangles, texture.as_slice())?;
    let field = match normal_source {
        NormalSource::Mesh => {
            let nm = render_normal_map(&mesh, &cache)?;
            sh_field_from_normals(width, height, &nm.data, &nm.valid)
        }
        NormalSource::Depth => normals_from_depth(&depth),
    };
    let shaded = shade(&albedo, lighting, &field)?;
    let data = shaded
        .data
        .iter()
        .zip(&depth.valid)
        .map(|(v, ok)| if *ok { *v } else { background })
        .collect();
    Ok(SynthScene {
        image: GrayImage::from_vec(width, height, data),
        depth_gt: depth,
        rep_gt: rep.clone(),
        lighting_gt: *lighting,
        texcoeffs_gt: texcoeffs.clone(),
        background_value: background,
    })
}

/// Dataset generation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub coeff_sigma: f64,
    pub tex_sigma: f64,
    pub pose: PoseRanges,
    pub background: f64,
    pub normal_source: NormalSource,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            width: 64,
            height: 64,
            coeff_sigma: 2.0,
            tex_sigma: 0.5,
            pose: PoseRanges::default(),
            background: 0.25,
            normal_source: NormalSource::Mesh,
        }
    }
}

/// Everything sampled for one dataset scene, before rendering.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub rep_gt: Representation,
    pub lighting: Lighting,
    pub texcoeffs: TextureCoeffs,
    pub rep_random: Representation,
    pub beta: f64,
}

/// Per-scene RNG stream derived from the dataset seed and scene index.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Draws the ground truth and the perturbation inputs for scene `index`.
pub fn sample_scene_params(
    model: &MorphableModel,
    cfg: &DatasetConfig,
    seed: u64,
    index: u64,
) -> SceneParams {
    let mut rng = scene_rng(seed, index);
    let rep_gt = sample_representation(&mut rng, model, &cfg.pose, cfg.coeff_sigma);
    let lighting = sample_lighting(&mut rng);
    let texcoeffs = TextureCoeffs {
        coeffs: DVector::from_fn(model.d_tex(), |_, _| {
            cfg.tex_sigma * rng.sample::<f64, _>(StandardNormal)
        }),
    };
    let rep_random = sample_representation(&mut rng, model, &cfg.pose, cfg.coeff_sigma);
    let beta = rng.gen_range(0.0..1.0);
    SceneParams {
        rep_gt,
        lighting,
        texcoeffs,
        rep_random,
        beta,
    }
}

/// Writes `count` scenes plus, per scene, a perturbed representation sampled
/// between the ground truth and a random one. Returns the manifest that was
/// also written to `manifest.json` in the output directory.
pub fn make_dataset(
    model: &MorphableModel,
    count: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &DatasetConfig,
) -> Result<formats::Manifest> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| crate::error::Error::io(out_dir.display().to_string(), e))?;
    let mut scenes = Vec::with_capacity(count);
    for index in 0..count {
        let params = sample_scene_params(model, cfg, seed, index as u64);
        let scene = render_scene(
            model,
            &params.rep_gt,
            &params.lighting,
            &params.texcoeffs,
            cfg.width,
            cfg.height,
            cfg.background,
            cfg.normal_source,
        )?;
        let r_t = interpolate_representation(&params.rep_gt, &params.rep_random, params.beta)?;

        let stem = format!("scene_{index:04}");
        let image_path = out_dir.join(format!("{stem}.pgm"));
        let depth_path = out_dir.join(format!("{stem}_depth.pfm"));
        let truth_path = out_dir.join(format!("{stem}_truth.json"));
        let perturbed_path = out_dir.join(format!("{stem}_rt.json"));

        formats::write_pgm(&image_path, &scene.image)?;
        let mask_path = formats::write_depth(&depth_path, &scene.depth_gt, None)?;
        formats::write_scene_truth(
            &truth_path,
            &scene.rep_gt,
            &scene.lighting_gt,
            &scene.texcoeffs_gt,
            scene.background_value,
            params.beta,
        )?;
        formats::write_representation(&perturbed_path, &r_t)?;

        scenes.push(formats::ManifestScene {
            index,
            beta: params.beta,
            image: image_path.display().to_string(),
            depth: depth_path.display().to_string(),
            mask: mask_path.display().to_string(),
            truth: truth_path.display().to_string(),
            perturbed: perturbed_path.display().to_string(),
        });
    }
    let manifest = formats::Manifest {
        schema_version: 1,
        seed,
        width: cfg.width,
        height: cfg.height,
        scenes,
    };
    formats::write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
