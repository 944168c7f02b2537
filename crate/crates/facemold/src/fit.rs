//! Optimization surrogates for the two reconstruction stages: a coarse
//! representation fitter driven through the rendering layer, and a fine depth
//! refiner minimizing the shape-from-shading criterion.
//!
//! The coarse fitter descends on half the squared masked depth residual with
//! a backtracking line search. Geometry coefficients take the analytic
//! rendering-layer backward pass; the six pose entries take central finite
//! differences of the same masked loss. The analytic backward pass carries
//! exactly zero gradient onto the in-plane translation and scale (depth
//! values do not depend on them once barycentric weights are frozen), so an
//! analytic-only fitter could never correct those parameters.
//!
//! The fine refiner recovers lighting and albedo once from the coarse depth,
//! then runs first-order descent on the composite loss starting at the coarse
//! depth, returning the iterate with the lowest total.

use crate::error::{Error, Result};
use crate::model::MorphableModel;
use crate::pose::{camera_transform, Representation};
use crate::raster::{
    backward_from_cache, rasterize, rasterize_scalar_attribute, DepthMap, GrayImage, RasterCache,
};
use crate::sfs::{loss, recover_albedo, recover_lighting, LossWeights};

/// Solver parameters shared by the coarse fitter and the depth refiner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Initial line-search step length.
    pub step_size: f64,
    /// Stop once the representation (or depth) change norm falls below this.
    pub convergence_threshold: f64,
    /// Weight of the squared tether to the initial representation.
    pub coarse_fidelity_weight: f64,
    /// Seed for any randomized driver built on top of the fitter; the fit
    /// itself is deterministic.
    pub rng_seed: u64,
    pub fit_geometry: bool,
    pub fit_pose: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 80,
            step_size: 1.0,
            convergence_threshold: 1e-6,
            coarse_fidelity_weight: 0.0,
            rng_seed: 0,
            fit_geometry: true,
            fit_pose: true,
        }
    }
}

/// Per-iteration record of a fit: accepted loss values (starting with the
/// initial one) and the representation-change norm of each step.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub loss: Vec<f64>,
    pub step_norm: Vec<f64>,
}

/// Elementwise blend `beta * r_gt + (1 - beta) * r_rnd` over the flattened
/// representation vector; angles interpolate linearly like everything else.
pub fn interpolate_representation(
    r_gt: &Representation,
    r_rnd: &Representation,
    beta: f64,
) -> Result<Representation> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange { beta });
    }
    let (d_id, d_exp) = (r_gt.geometry.id.len(), r_gt.geometry.exp.len());
    if r_rnd.geometry.id.len() != d_id {
        return Err(Error::DimensionMismatch {
            what: "id coefficients",
            expected: d_id,
            got: r_rnd.geometry.id.len(),
        });
    }
    if r_rnd.geometry.exp.len() != d_exp {
        return Err(Error::DimensionMismatch {
            what: "exp coefficients",
            expected: d_exp,
            got: r_rnd.geometry.exp.len(),
        });
    }
    let a = r_gt.flat();
    let b = r_rnd.flat();
    let blended: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| beta * x + (1.0 - beta) * y)
        .collect();
    Representation::from_flat(d_id, d_exp, &blended)
}

const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;

struct CoarseObjective<'a> {
    model: &'a MorphableModel,
    target: &'a DepthMap,
    mask: Vec<bool>,
    r_init_flat: Vec<f64>,
    fidelity_weight: f64,
}

impl CoarseObjective<'_> {
    /// Half the squared depth residual over the frozen mask intersected with
    /// current coverage, plus the fidelity tether.
    fn eval(&self, rep: &Representation) -> Result<(f64, DepthMap, RasterCache)> {
        let mesh = camera_transform(self.model, rep)?;
        let (depth, cache) = rasterize(&mesh, self.target.width, self.target.height);
        let mut acc = 0.0;
        for i in 0..depth.depth.len() {
            if self.mask[i] && depth.valid[i] {
                let r = depth.depth[i] - self.target.depth[i];
                acc += r * r;
            }
        }
        let mut value = 0.5 * acc;
        if self.fidelity_weight > 0.0 {
            let flat = rep.flat();
            value += self.fidelity_weight
                * flat
                    .iter()
                    .zip(&self.r_init_flat)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "coarse fit loss".into(),
            });
        }
        Ok((value, depth, cache))
    }

    fn value(&self, rep: &Representation) -> Result<f64> {
        Ok(self.eval(rep)?.0)
    }
}

/// Fits a representation to a target depth map by gradient descent with a
/// backtracking line search. The valid mask is frozen at entry (intersection
/// of the initial render's coverage and the target's validity); re-rendering
/// the mask is the caller's loop, see [`fit_coarse_feedback`].
pub fn fit_coarse(
    target: &DepthMap,
    model: &MorphableModel,
    r_init: &Representation,
    cfg: &FitConfig,
) -> Result<(Representation, FitTrace)> {
    if target.valid_count() == 0 {
        return Err(Error::EmptyMask {
            context: "coarse fit target",
        });
    }
    let mesh = camera_transform(model, r_init)?;
    let (initial_depth, _) = rasterize(&mesh, target.width, target.height);
    let mask: Vec<bool> = initial_depth
        .valid
        .iter()
        .zip(&target.valid)
        .map(|(a, b)| *a && *b)
        .collect();
    if !mask.iter().any(|m| *m) {
        return Err(Error::EmptyMask {
            context: "coarse fit mask intersection",
        });
    }
    let objective = CoarseObjective {
        model,
        target,
        mask,
        r_init_flat: r_init.flat(),
        fidelity_weight: cfg.coarse_fidelity_weight,
    };

    let (d_id, d_exp) = (model.d_id(), model.d_exp());
    let mut rep = r_init.clone();
    let mut trace = FitTrace::default();
    let (mut current, mut depth, mut cache) = objective.eval(&rep)?;
    trace.loss.push(current);
    let mut step = cfg.step_size.min(1.0);

    for _ in 0..cfg.max_iterations {
        let (grad, direction) =
            coarse_step_direction(&objective, model, &rep, &depth, &cache, cfg, current)?;
        // The diagonal is positive, so the slope along -direction is positive
        // whenever the gradient is nonzero.
        let slope: f64 = grad.iter().zip(&direction).map(|(g, d)| g * d).sum();
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm < 1e-14 || slope <= 0.0 {
            break;
        }

        let flat = rep.flat();
        let mut accepted = None;
        let mut t = step;
        while t >= MIN_STEP {
            let candidate_flat: Vec<f64> = flat
                .iter()
                .zip(&direction)
                .map(|(v, d)| v - t * d)
                .collect();
            // Scale must stay positive for the candidate to be evaluable.
            if candidate_flat[d_id + d_exp + 5] <= 0.0 {
                t *= 0.5;
                continue;
            }
            let candidate = Representation::from_flat(d_id, d_exp, &candidate_flat)?;
            let value = objective.value(&candidate)?;
            if value <= current - ARMIJO_C1 * t * slope {
                accepted = Some((candidate, value, t));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, value, t)) = accepted else {
            break; // no descent step exists at this resolution
        };
        let step_norm = t * direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        rep = candidate;
        current = value;
        step = (t * 2.0).min(cfg.step_size.min(1.0));
        let evaluated = objective.eval(&rep)?;
        depth = evaluated.1;
        cache = evaluated.2;
        trace.loss.push(current);
        trace.step_norm.push(step_norm);
        if step_norm < cfg.convergence_threshold {
            break;
        }
    }
    Ok((rep, trace))
}

/// Gradient and diagonally preconditioned descent direction of the coarse
/// objective.
///
/// Geometry block: the analytic rendering-layer backward pass, preconditioned
/// by the Gauss-Newton diagonal (the masked sum of squared depth Jacobians,
/// one attribute rasterization per coefficient). Pose block: central finite
/// differences of the objective for both slope and curvature; the frozen
/// barycentric backward pass carries no translation or scale gradient, so an
/// analytic-only pose step could never correct those parameters. Mixed units
/// across the blocks make plain gradient descent crawl; the diagonal brings
/// every entry to a comparable step scale.
fn coarse_step_direction(
    objective: &CoarseObjective,
    model: &MorphableModel,
    rep: &Representation,
    depth: &DepthMap,
    cache: &RasterCache,
    cfg: &FitConfig,
    current: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d_id, d_exp) = (model.d_id(), model.d_exp());
    let total = d_id + d_exp + 6;
    let mut grad = vec![0.0; total];
    let mut curvature = vec![0.0; total];

    if cfg.fit_geometry {
        let mut grad_depth = GrayImage::zeros(depth.width, depth.height);
        for i in 0..depth.depth.len() {
            if objective.mask[i] && depth.valid[i] {
                grad_depth.data[i] = depth.depth[i] - objective.target.depth[i];
            }
        }
        let mesh = camera_transform(model, rep)?;
        let analytic = backward_from_cache(model, rep, &mesh, cache, &grad_depth)?;
        grad[..d_id].copy_from_slice(analytic.id.as_slice());
        grad[d_id..d_id + d_exp].copy_from_slice(analytic.exp.as_slice());

        // Per-coefficient depth sensitivity: the third row of R applied to
        // the basis column, blended like any vertex attribute.
        let r = crate::pose::rotation_matrix(&rep.pose);
        let row_z = [r[(2, 0)], r[(2, 1)], r[(2, 2)]];
        let mut sensitivity = vec![0.0; model.vertex_count];
        for k in 0..d_id + d_exp {
            let basis = if k < d_id {
                &model.id_basis
            } else {
                &model.exp_basis
            };
            let c = if k < d_id { k } else { k - d_id };
            for v in 0..model.vertex_count {
                sensitivity[v] = row_z[0] * basis[(3 * v, c)]
                    + row_z[1] * basis[(3 * v + 1, c)]
                    + row_z[2] * basis[(3 * v + 2, c)];
            }
            let map = rasterize_scalar_attribute(cache, &model.triangles, &sensitivity)?;
            let mut acc = 0.0;
            for i in 0..map.data.len() {
                if objective.mask[i] && map.valid[i] {
                    acc += map.data[i] * map.data[i];
                }
            }
            curvature[k] = acc;
        }
    }

    if cfg.fit_pose {
        let flat = rep.flat();
        for k in 0..6 {
            let idx = d_id + d_exp + k;
            let h = 1e-4 * flat[idx].abs().max(1.0);
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            if minus[d_id + d_exp + 5] <= 0.0 {
                minus[d_id + d_exp + 5] = flat[d_id + d_exp + 5] * 0.5;
            }
            let fp = objective.value(&Representation::from_flat(d_id, d_exp, &plus)?)?;
            let fm = objective.value(&Representation::from_flat(d_id, d_exp, &minus)?)?;
            let span = plus[idx] - minus[idx];
            grad[idx] = (fp - fm) / span;
            curvature[idx] = ((fp - 2.0 * current + fm) / (0.5 * span * 0.5 * span)).max(0.0);
        }
    }

    if cfg.coarse_fidelity_weight > 0.0 {
        let flat = rep.flat();
        for k in 0..total {
            let fitted = if k < d_id + d_exp {
                cfg.fit_geometry
            } else {
                cfg.fit_pose
            };
            if fitted {
                grad[k] += 2.0 * cfg.coarse_fidelity_weight * (flat[k] - objective.r_init_flat[k]);
                if k < d_id + d_exp {
                    curvature[k] += 2.0 * cfg.coarse_fidelity_weight;
                }
            }
        }
    }

    // Cap the per-entry step of a full (t = 1) move by a natural trust
    // radius, which also defuses entries whose finite-difference curvature is
    // pure noise: coefficients one sigma, angles 0.2 rad, translations 4 px,
    // scale 10% of its value.
    let trust = |k: usize| -> f64 {
        if k < d_id + d_exp {
            1.0
        } else {
            match k - (d_id + d_exp) {
                0..=2 => 0.2,
                3 | 4 => 4.0,
                _ => 0.1 * rep.pose.scale,
            }
        }
    };
    let c_max = curvature.iter().cloned().fold(0.0f64, f64::max);
    let floor = (1e-8 * c_max).max(1e-12);
    let direction = grad
        .iter()
        .zip(&curvature)
        .enumerate()
        .map(|(k, (g, c))| g / c.max(g.abs() / trust(k)).max(floor))
        .collect();
    Ok((grad, direction))
}

/// Iterated coarse fitting: each round re-renders the coverage mask from the
/// previous solution and fits again, mirroring the feedback loop that
/// gradually refines the visibility mask. Returns the final representation,
/// the per-round traces and the representation after each round.
pub fn fit_coarse_feedback(
    target: &DepthMap,
    model: &MorphableModel,
    r_init: &Representation,
    cfg: &FitConfig,
    rounds: usize,
) -> Result<(Representation, Vec<FitTrace>, Vec<Representation>)> {
    let mut rep = r_init.clone();
    let mut traces = Vec::with_capacity(rounds);
    let mut snapshots = Vec::with_capacity(rounds);
    for round in 0..rounds {
        match fit_coarse(target, model, &rep, cfg) {
            Ok((next, trace)) => {
                rep = next;
                traces.push(trace);
                snapshots.push(rep.clone());
            }
            // A later round can lose all overlap with the target (the fit
            // walked the face off the mask); keep the last usable state.
            Err(Error::EmptyMask { .. }) if round > 0 => break,
            Err(e) => return Err(e),
        }
    }
    Ok((rep, traces, snapshots))
}

/// Recovers lighting from the coarse depth under the mean albedo, then the
/// texture coefficients under that lighting. Returns both plus the rasterized
/// recovered-albedo map.
pub fn recover_illumination(
    z0: &DepthMap,
    image: &GrayImage,
    model: &MorphableModel,
    cache: &RasterCache,
) -> Result<(crate::sfs::Lighting, crate::model::TextureCoeffs, crate::raster::ScalarMap)> {
    let mu_map = rasterize_scalar_attribute(cache, &model.triangles, model.mean_texture.as_slice())?;
    let lighting = recover_lighting(z0, image, &mu_map)?;
    let texcoeffs = recover_albedo(z0, image, &lighting, model, cache)?;
    let texture = model.synthesize_texture(&texcoeffs)?;
    let albedo = rasterize_scalar_attribute(cache, &model.triangles, texture.as_slice())?;
    Ok((lighting, texcoeffs, albedo))
}

/// Refines a coarse depth map against an image under the shading criterion.
/// Lighting and albedo are recovered once from the coarse depth and frozen;
/// descent starts at the coarse depth and the lowest-loss iterate wins.
pub fn refine_depth(
    z0: &DepthMap,
    image: &GrayImage,
    model: &MorphableModel,
    cache: &RasterCache,
    weights: &LossWeights,
    cfg: &FitConfig,
) -> Result<DepthMap> {
    if z0.valid_count() == 0 {
        return Err(Error::EmptyMask {
            context: "refine input depth",
        });
    }
    let (lighting, _texcoeffs, albedo) = recover_illumination(z0, image, model, cache)?;
    refine_depth_with_illumination(z0, image, &albedo, &lighting, weights, cfg)
}

/// The descent stage of [`refine_depth`] with the illumination supplied
/// explicitly instead of recovered from the coarse depth.
pub fn refine_depth_with_illumination(
    z0: &DepthMap,
    image: &GrayImage,
    albedo: &crate::raster::ScalarMap,
    lighting: &crate::sfs::Lighting,
    weights: &LossWeights,
    cfg: &FitConfig,
) -> Result<DepthMap> {
    let albedo = albedo.clone();
    let lighting = *lighting;

    // First-order descent with Barzilai-Borwein step lengths and a
    // non-monotone backtracking safeguard (sufficient decrease against the
    // worst of the last few accepted values). The shading Hessian is much
    // stiffer than the fidelity floor, so plain steepest descent crawls;
    // spectral steps close the gap while staying first order. The lowest
    // total seen wins regardless of the non-monotone excursions.
    let mut z = z0.clone();
    let mut breakdown = loss(&z, z0, image, &albedo, &lighting, weights)?;
    let mut best = z.clone();
    let mut best_total = breakdown.total;
    let mut recent: Vec<f64> = vec![breakdown.total];
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut fallback_step = cfg.step_size;

    for _ in 0..cfg.max_iterations {
        let grad = breakdown.grad.data.clone();
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        if grad_sq.sqrt() < 1e-12 {
            break;
        }
        let mut t = match &previous {
            Some((prev_z, prev_g)) => {
                let mut sy = 0.0;
                let mut ss = 0.0;
                for i in 0..grad.len() {
                    let s = z.depth[i] - prev_z[i];
                    let y = grad[i] - prev_g[i];
                    sy += s * y;
                    ss += s * s;
                }
                if sy > 0.0 {
                    (ss / sy).clamp(MIN_STEP, 1e8)
                } else {
                    fallback_step
                }
            }
            None => fallback_step,
        };
        let reference = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut accepted = false;
        while t >= MIN_STEP {
            let mut candidate = z.clone();
            for (zv, g) in candidate.depth.iter_mut().zip(&grad) {
                *zv -= t * g;
            }
            let cand_breakdown = loss(&candidate, z0, image, &albedo, &lighting, weights)?;
            if cand_breakdown.total <= reference - ARMIJO_C1 * t * grad_sq {
                let step_inf = grad.iter().fold(0.0f64, |a, g| a.max((t * g).abs()));
                previous = Some((z.depth.clone(), grad.clone()));
                z = candidate;
                breakdown = cand_breakdown;
                recent.push(breakdown.total);
                if recent.len() > 8 {
                    recent.remove(0);
                }
                if breakdown.total < best_total {
                    best_total = breakdown.total;
                    best = z.clone();
                }
                accepted = true;
                fallback_step = t;
                if step_inf < cfg.convergence_threshold {
                    return Ok(best);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(best)
}

/// Output of the full reconstruction pipeline.
#[derive(Debug, Clone)]
pub struct ReconstructOutput {
    pub representation: Representation,
    pub coarse: DepthMap,
    pub fine: DepthMap,
    pub traces: Vec<FitTrace>,
    /// Representation after each coarse feedback round, for progress strips.
    pub snapshots: Vec<Representation>,
}

/// Reconstruction pipeline parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructConfig {
    pub fit: FitConfig,
    pub weights: LossWeights,
    /// Coarse feedback rounds.
    pub rounds: usize,
    /// Scale of the zero-initialized representation.
    pub nominal_scale: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            fit: FitConfig::default(),
            weights: LossWeights::default(),
            rounds: 4,
            nominal_scale: 1.0,
        }
    }
}

/// Composes the coarse fit against a target depth map with the rendering
/// layer and the fine refinement of the resulting depth against the image.
pub fn reconstruct(
    image: &GrayImage,
    target: &DepthMap,
    model: &MorphableModel,
    cfg: &ReconstructConfig,
) -> Result<ReconstructOutput> {
    if image.width != target.width || image.height != target.height {
        return Err(Error::ShapeMismatch {
            what: "image vs target depth",
            expected_w: target.width,
            expected_h: target.height,
            got_w: image.width,
            got_h: image.height,
        });
    }
    let r0 = Representation::neutral(model.d_id(), model.d_exp(), cfg.nominal_scale);
    let (rep, traces, snapshots) =
        fit_coarse_feedback(target, model, &r0, &cfg.fit, cfg.rounds.max(1))?;
    let mesh = camera_transform(model, &rep)?;
    let (coarse, cache) = rasterize(&mesh, target.width, target.height);
    let fine = refine_depth(&coarse, image, model, &cache, &cfg.weights, &cfg.fit)?;
    Ok(ReconstructOutput {
        representation: rep,
        coarse,
        fine,
        traces,
        snapshots,
    })
}
