// Scratch experiment used while tuning the refiner; superseded by the
// acceptance suite.
use facemold::fit::{refine_depth, FitConfig};
use facemold::pose::{camera_transform, Representation};
use facemold::raster::rasterize;
use facemold::raster::rasterize_scalar_attribute;
use facemold::sfs::{normals_from_depth, shade, LossWeights};
use facemold::synth::{generate_toy_model, sample_lighting, ToyModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
#[ignore]
fn tune_bump_recovery() {
    for seed in 0..10u64 {
        let model = generate_toy_model(seed, &ToyModelConfig { d_tex: 1, extent: 26.0, ..ToyModelConfig::default() });
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xbeef);
        let rep = Representation::neutral(model.d_id(), model.d_exp(), 1.0);
        let mesh = camera_transform(&model, &rep).unwrap();
        let (z0, cache) = rasterize(&mesh, 64, 64);
        let (lo, hi) = z0.depth_range().unwrap();
        let range = hi - lo;
        let amp = 0.02 * range;

        // Gaussian bumps inside the coverage.
        let mut truth = z0.clone();
        for bump in 0..10 {
            let cx = rng.gen_range(21.0..43.0);
            let cy = rng.gen_range(21.0..43.0);
            let sigma: f64 = rng.gen_range(1.4..2.2);
            let sign: f64 = if bump % 2 == 0 { 1.0 } else { -1.0 };
            for y in 0..64usize {
                for x in 0..64usize {
                    let i = y * 64 + x;
                    if truth.valid[i] {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        truth.depth[i] += sign * amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        let lighting = {
            let l0 = rng.gen_range(0.50..0.60);
            let dx: f64 = rng.gen_range(-0.8..0.8);
            let dy: f64 = rng.gen_range(-0.8..0.8);
            let dz: f64 = rng.gen_range(0.3..0.6);
            let n = (dx * dx + dy * dy + dz * dz).sqrt();
            let mag = rng.gen_range(0.30..0.40);
            facemold::sfs::Lighting { l: [l0, mag * dx / n, mag * dy / n, mag * dz / n] }
        };
        let _ = sample_lighting(&mut rng);
        let albedo = rasterize_scalar_attribute(&cache, &model.triangles, model.mean_texture.as_slice()).unwrap();
        let field = normals_from_depth(&truth);
        let image = shade(&albedo, &lighting, &field).unwrap();

        let rmse = |a: &facemold::raster::DepthMap| {
            facemold::eval::masked_rmse(a, &truth).unwrap()
        };
        {
            let (l_rec, tc_rec, _alb) = facemold::fit::recover_illumination(&z0, &image, &model, &cache).unwrap();
            let l_err = (0..4).map(|k| (l_rec.l[k] - lighting.l[k]).abs()).fold(0.0f64, f64::max);
            let tc_max = tc_rec.coeffs.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
            println!("seed {seed} DIAG: |l_rec - l_true|inf {:.2e} (|l| {:.2}) alpha_theft_inf {:.2e}", l_err, lighting.l[0], tc_max);
        }
        for (wsh, wf, wsm, true_light) in [
            (65025.0, 0.3, 0.0, false),
            (65025.0, 0.3, 0.05, false),
            (65025.0, 1.0, 0.02, false),
            (65025.0, 0.3, 0.0, true),
        ] {
            let iters = 400usize;
            let cfg = FitConfig { max_iterations: iters, ..FitConfig::default() };
            let weights = LossWeights { lambda_sh: wsh, lambda_f: wf, lambda_sm: wsm };
            let refined = if true_light {
                facemold::fit::refine_depth_with_illumination(&z0, &image, &albedo, &lighting, &weights, &cfg).unwrap()
            } else {
                refine_depth(&z0, &image, &model, &cache, &weights, &cfg).unwrap()
            };
            // Recover the frozen lighting/albedo the same way refine does.
            let (lighting_rec, _tc, albedo_rec) = facemold::fit::recover_illumination(&z0, &image, &model, &cache).unwrap();
            let at = |zz: &facemold::raster::DepthMap| {
                facemold::sfs::loss(zz, &z0, &image, &albedo_rec, &lighting_rec, &weights).unwrap()
            };
            let at_truth = at(&truth);
            let at_result = at(&refined);
            let at_start = at(&z0);
            let _ = (at_start, at_result, at_truth);
            println!(
                "seed {seed} w=({wsh},{wf},{wsm}) true_light={true_light}: ratio {:.3}",
                rmse(&refined) / rmse(&z0)
            );
        }
    }
}
