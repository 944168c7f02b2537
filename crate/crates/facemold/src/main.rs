//! Command-line surface tying the pipeline together.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 on numerical
//! failures. All randomness derives from `--seed`; `--threads` only controls
//! rasterization parallelism and never changes any output byte.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use facemold::error::{Error, Result};
use facemold::fit::{
    fit_coarse_feedback, recover_illumination, reconstruct, refine_depth, FitConfig, FitTrace,
    ReconstructConfig,
};
use facemold::formats;
use facemold::model::MorphableModel;
use facemold::pose::{camera_transform, Representation};
use facemold::raster::{rasterize, render_normal_map, render_pncc, DepthMap};
use facemold::sfs::LossWeights;
use facemold::synth::{make_dataset, generate_toy_model, DatasetConfig, NormalSource, PoseRanges, ToyModelConfig};

#[derive(Parser)]
#[command(
    name = "facemold",
    version,
    about = "Coarse-to-fine face reconstruction by direct optimization",
    long_about = "Morphable-model synthesis, differentiable depth rasterization and \
                  shape-from-shading refinement, driven by deterministic optimization.\n\
                  Euler convention: R = Rz(roll) * Ry(yaw) * Rx(pitch); the camera applies \
                  scale before translation and depth carries no focal scaling."
)]
struct Cli {
    /// Seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for rasterization (0 = automatic). Outputs are
    /// identical for every thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic toy morphable model container.
    GenModel {
        /// Vertices per grid side.
        #[arg(long, default_value_t = 30)]
        grid: usize,
        #[arg(long, default_value_t = 8)]
        d_id: usize,
        #[arg(long, default_value_t = 4)]
        d_exp: usize,
        #[arg(long, default_value_t = 10)]
        d_tex: usize,
        /// Grid half-width in model units.
        #[arg(long, default_value_t = 22.0)]
        extent: f64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Print a model container header.
    ModelInfo { model: PathBuf },

    /// Generate a synthetic dataset with ground truth and perturbed
    /// representations.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 2.0)]
        coeff_sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        tex_sigma: f64,
        /// Angle range in radians.
        #[arg(long, default_value_t = 0.35)]
        angle_range: f64,
        /// Translation range in pixels.
        #[arg(long, default_value_t = 10.0)]
        translation_range: f64,
        #[arg(long, default_value_t = 0.8)]
        scale_lo: f64,
        #[arg(long, default_value_t = 1.2)]
        scale_hi: f64,
        #[arg(long, default_value_t = 1.0)]
        nominal_scale: f64,
        #[arg(long, default_value_t = 0.25)]
        background: f64,
        #[arg(long, value_enum, default_value_t = NormalSourceArg::Mesh)]
        normal_source: NormalSourceArg,
    },

    /// Render the depth map (and optionally the feedback channels) of a
    /// representation.
    Render {
        #[arg(long)]
        model: PathBuf,
        /// "zero" for the neutral representation, or a representation JSON
        /// path.
        #[arg(long, default_value = "zero")]
        rep: String,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Scale used by the "zero" representation.
        #[arg(long, default_value_t = 1.0)]
        nominal_scale: f64,
        /// Background fill for invalid pixels (default: max + 10% range).
        #[arg(long)]
        fill: Option<f64>,
        #[arg(long)]
        out_depth: PathBuf,
        #[arg(long)]
        pncc: Option<PathBuf>,
        #[arg(long)]
        normals: Option<PathBuf>,
    },

    /// Fit a representation to a target depth map through the rendering
    /// layer.
    FitCoarse {
        #[arg(long)]
        model: PathBuf,
        /// Target depth PFM (a `<stem>.mask.png` sidecar is honored).
        #[arg(long)]
        target: PathBuf,
        /// "zero" or a representation JSON path.
        #[arg(long, default_value = "zero")]
        init: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        convergence_threshold: Option<f64>,
        #[arg(long)]
        fidelity_weight: Option<f64>,
        /// Feedback rounds with re-rendered masks.
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        nominal_scale: f64,
        /// Freeze geometry coefficients.
        #[arg(long, conflicts_with = "geometry_only")]
        pose_only: bool,
        /// Freeze pose parameters.
        #[arg(long)]
        geometry_only: bool,
    },

    /// Refine the depth rendered from a representation against an image.
    Refine {
        #[arg(long)]
        model: PathBuf,
        /// Representation JSON whose render provides the coarse depth.
        #[arg(long)]
        rep: PathBuf,
        /// Grayscale PGM image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recovered lighting and texture coefficients, for inspection.
        #[arg(long)]
        illumination_out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        convergence_threshold: Option<f64>,
        #[arg(long)]
        lambda_sh: Option<f64>,
        #[arg(long)]
        lambda_f: Option<f64>,
        #[arg(long)]
        lambda_sm: Option<f64>,
    },

    /// Full pipeline: coarse fit against a target depth, render, refine
    /// against the image. Emits per-round feedback channels.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        /// Grayscale PGM image.
        #[arg(long)]
        image: PathBuf,
        /// "depth:<file.pfm>" to fit a stored depth map, or
        /// "synth:<rep.json>" to render the target internally.
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        convergence_threshold: Option<f64>,
        #[arg(long)]
        fidelity_weight: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        nominal_scale: Option<f64>,
        #[arg(long)]
        lambda_sh: Option<f64>,
        #[arg(long)]
        lambda_f: Option<f64>,
        #[arg(long)]
        lambda_sm: Option<f64>,
    },

    /// Depth-error statistics between two depth maps.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Extra mask PNG intersected with both validity masks.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Absolute-error heat map output (PFM + quantized PNG).
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },

    /// Check every backward pass against finite differences.
    Gradcheck {},
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormalSourceArg {
    /// Interpolated mesh vertex normals.
    Mesh,
    /// Normals differentiated from the rendered depth map.
    Depth,
}

impl From<NormalSourceArg> for NormalSource {
    fn from(v: NormalSourceArg) -> Self {
        match v {
            NormalSourceArg::Mesh => NormalSource::Mesh,
            NormalSourceArg::Depth => NormalSource::Depth,
        }
    }
}

/// Values an optional JSON config file may provide; explicit flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    max_iterations: Option<usize>,
    step_size: Option<f64>,
    convergence_threshold: Option<f64>,
    coarse_fidelity_weight: Option<f64>,
    rounds: Option<usize>,
    nominal_scale: Option<f64>,
    lambda_sh: Option<f64>,
    lambda_f: Option<f64>,
    lambda_sm: Option<f64>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(p.display().to_string(), e.to_string()))
        }
    }
}

#[derive(Serialize)]
struct TraceFile {
    rounds: Vec<TraceRound>,
}

#[derive(Serialize)]
struct TraceRound {
    loss: Vec<f64>,
    step_norm: Vec<f64>,
}

fn trace_file(traces: &[FitTrace]) -> TraceFile {
    TraceFile {
        rounds: traces
            .iter()
            .map(|t| TraceRound {
                loss: t.loss.clone(),
                step_norm: t.step_norm.clone(),
            })
            .collect(),
    }
}

fn load_representation(spec: &str, model: &MorphableModel, nominal_scale: f64) -> Result<Representation> {
    if spec == "zero" {
        Ok(Representation::neutral(model.d_id(), model.d_exp(), nominal_scale))
    } else {
        let rep = formats::read_representation(Path::new(spec))?;
        if rep.geometry.id.len() != model.d_id() || rep.geometry.exp.len() != model.d_exp() {
            return Err(Error::DimensionMismatch {
                what: "representation vs model bases",
                expected: model.d_id() + model.d_exp() + 6,
                got: rep.flat_len(),
            });
        }
        Ok(rep)
    }
}

/// Renders the feedback channels of a representation into
/// `<dir>/iterNN_pncc.png` and `<dir>/iterNN_normals.png`.
fn write_feedback_channels(
    dir: &Path,
    round: usize,
    model: &MorphableModel,
    rep: &Representation,
    width: usize,
    height: usize,
) -> Result<()> {
    let mesh = camera_transform(model, rep)?;
    let (_, cache) = rasterize(&mesh, width, height);
    let pncc = render_pncc(model, &cache)?;
    formats::write_channel_map_png16(
        &dir.join(format!("iter{round:02}_pncc.png")),
        &pncc,
        0.0,
        1.0,
    )?;
    let normals = render_normal_map(&mesh, &cache)?;
    formats::write_channel_map_png16(
        &dir.join(format!("iter{round:02}_normals.png")),
        &normals,
        -1.0,
        1.0,
    )
}

fn resolve_fit(
    file: &FileConfig,
    seed: u64,
    iterations: Option<usize>,
    step_size: Option<f64>,
    convergence_threshold: Option<f64>,
    fidelity_weight: Option<f64>,
) -> FitConfig {
    let defaults = FitConfig::default();
    FitConfig {
        max_iterations: iterations
            .or(file.max_iterations)
            .unwrap_or(defaults.max_iterations),
        step_size: step_size.or(file.step_size).unwrap_or(defaults.step_size),
        convergence_threshold: convergence_threshold
            .or(file.convergence_threshold)
            .unwrap_or(defaults.convergence_threshold),
        coarse_fidelity_weight: fidelity_weight
            .or(file.coarse_fidelity_weight)
            .unwrap_or(defaults.coarse_fidelity_weight),
        rng_seed: seed,
        ..defaults
    }
}

fn resolve_weights(
    file: &FileConfig,
    lambda_sh: Option<f64>,
    lambda_f: Option<f64>,
    lambda_sm: Option<f64>,
) -> LossWeights {
    let defaults = LossWeights::default();
    LossWeights {
        lambda_sh: lambda_sh.or(file.lambda_sh).unwrap_or(defaults.lambda_sh),
        lambda_f: lambda_f.or(file.lambda_f).unwrap_or(defaults.lambda_f),
        lambda_sm: lambda_sm.or(file.lambda_sm).unwrap_or(defaults.lambda_sm),
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let threads = cli.threads.or(file.threads).unwrap_or(0);
    if threads > 0 {
        // Ignore re-initialization: the pool can only be set once per
        // process and the outputs do not depend on it anyway.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    match cli.command {
        Command::GenModel {
            grid,
            d_id,
            d_exp,
            d_tex,
            extent,
            out,
        } => {
            if grid < 8 || d_id == 0 || d_exp == 0 || d_tex == 0 {
                return Err(Error::InvalidModel(
                    "grid must be >= 8 and basis dimensions >= 1".into(),
                ));
            }
            let model = generate_toy_model(
                seed,
                &ToyModelConfig {
                    grid,
                    d_id,
                    d_exp,
                    d_tex,
                    extent,
                },
            );
            formats::write_model(&out, &model)?;
            println!(
                "wrote {} ({} vertices, {} triangles)",
                out.display(),
                model.vertex_count,
                model.triangles.len()
            );
            Ok(())
        }

        Command::ModelInfo { model } => {
            let header = formats::read_model_header(&model)?;
            println!("magic: FMM1");
            println!("vertex_count: {}", header.vertex_count);
            println!("triangle_count: {}", header.triangle_count);
            println!("d_id: {}", header.d_id);
            println!("d_exp: {}", header.d_exp);
            println!("d_tex: {}", header.d_tex);
            Ok(())
        }

        Command::Synth {
            model,
            count,
            out,
            width,
            height,
            coeff_sigma,
            tex_sigma,
            angle_range,
            translation_range,
            scale_lo,
            scale_hi,
            nominal_scale,
            background,
            normal_source,
        } => {
            let model = formats::read_model(&model)?;
            let cfg = DatasetConfig {
                width,
                height,
                coeff_sigma,
                tex_sigma,
                pose: PoseRanges {
                    angle: angle_range,
                    translation: translation_range,
                    scale_lo,
                    scale_hi,
                    nominal_scale,
                },
                background,
                normal_source: normal_source.into(),
            };
            let manifest = make_dataset(&model, count, seed, &out, &cfg)?;
            println!(
                "wrote {} scenes and {}",
                manifest.scenes.len(),
                out.join("manifest.json").display()
            );
            Ok(())
        }

        Command::Render {
            model,
            rep,
            width,
            height,
            nominal_scale,
            fill,
            out_depth,
            pncc,
            normals,
        } => {
            let model = formats::read_model(&model)?;
            let rep = load_representation(&rep, &model, nominal_scale)?;
            let mesh = camera_transform(&model, &rep)?;
            let (depth, cache) = rasterize(&mesh, width, height);
            formats::write_depth(&out_depth, &depth, fill)?;
            println!(
                "wrote {} ({} of {} pixels covered)",
                out_depth.display(),
                depth.valid_count(),
                width * height
            );
            if let Some(path) = pncc {
                let map = render_pncc(&model, &cache)?;
                formats::write_channel_map_png16(&path, &map, 0.0, 1.0)?;
                println!("wrote {}", path.display());
            }
            if let Some(path) = normals {
                let map = render_normal_map(&mesh, &cache)?;
                formats::write_channel_map_png16(&path, &map, -1.0, 1.0)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }

        Command::FitCoarse {
            model,
            target,
            init,
            out,
            trace_out,
            iterations,
            step_size,
            convergence_threshold,
            fidelity_weight,
            rounds,
            nominal_scale,
            pose_only,
            geometry_only,
        } => {
            let model = formats::read_model(&model)?;
            let target = formats::read_depth(&target)?;
            let r_init = load_representation(&init, &model, nominal_scale)?;
            let mut cfg = resolve_fit(
                &file,
                seed,
                iterations,
                step_size,
                convergence_threshold,
                fidelity_weight,
            );
            cfg.fit_geometry = !pose_only;
            cfg.fit_pose = !geometry_only;
            let rounds = rounds.or(file.rounds).unwrap_or(4);
            let (fitted, traces, _) =
                fit_coarse_feedback(&target, &model, &r_init, &cfg, rounds.max(1))?;
            formats::write_representation(&out, &fitted)?;
            let final_loss = traces
                .last()
                .and_then(|t| t.loss.last())
                .copied()
                .unwrap_or(f64::NAN);
            println!("wrote {} (final loss {final_loss:.6e})", out.display());
            if let Some(path) = trace_out {
                let f = std::fs::File::create(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                serde_json::to_writer_pretty(std::io::BufWriter::new(f), &trace_file(&traces))
                    .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }

        Command::Refine {
            model,
            rep,
            image,
            out,
            illumination_out,
            iterations,
            step_size,
            convergence_threshold,
            lambda_sh,
            lambda_f,
            lambda_sm,
        } => {
            let model = formats::read_model(&model)?;
            let rep = formats::read_representation(&rep)?;
            let image = formats::read_pgm(&image)?;
            let mesh = camera_transform(&model, &rep)?;
            let (z0, cache) = rasterize(&mesh, image.width, image.height);
            let weights = resolve_weights(&file, lambda_sh, lambda_f, lambda_sm);
            let cfg = resolve_fit(&file, seed, iterations, step_size, convergence_threshold, None);
            if let Some(path) = illumination_out {
                let (lighting, texcoeffs, _) = recover_illumination(&z0, &image, &model, &cache)?;
                formats::write_recovered_illumination(&path, &lighting, &texcoeffs)?;
                println!("wrote {}", path.display());
            }
            let refined = refine_depth(&z0, &image, &model, &cache, &weights, &cfg)?;
            formats::write_depth(&out, &refined, None)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::Reconstruct {
            model,
            image,
            target,
            out,
            iterations,
            step_size,
            convergence_threshold,
            fidelity_weight,
            rounds,
            nominal_scale,
            lambda_sh,
            lambda_f,
            lambda_sm,
        } => {
            let model = formats::read_model(&model)?;
            let image = formats::read_pgm(&image)?;
            let nominal = nominal_scale.or(file.nominal_scale).unwrap_or(1.0);
            let target_depth: DepthMap = match target.split_once(':') {
                Some(("depth", path)) => formats::read_depth(Path::new(path))?,
                Some(("synth", path)) => {
                    let rep = load_representation(path, &model, nominal)?;
                    let mesh = camera_transform(&model, &rep)?;
                    rasterize(&mesh, image.width, image.height).0
                }
                _ => {
                    return Err(Error::format(
                        target,
                        "expected --target depth:<file.pfm> or synth:<rep.json>",
                    ))
                }
            };
            let cfg = ReconstructConfig {
                fit: resolve_fit(
                    &file,
                    seed,
                    iterations,
                    step_size,
                    convergence_threshold,
                    fidelity_weight,
                ),
                weights: resolve_weights(&file, lambda_sh, lambda_f, lambda_sm),
                rounds: rounds.or(file.rounds).unwrap_or(4),
                nominal_scale: nominal,
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let result = reconstruct(&image, &target_depth, &model, &cfg)?;

            formats::write_representation(&out.join("representation.json"), &result.representation)?;
            formats::write_depth(&out.join("target.pfm"), &target_depth, None)?;
            formats::write_depth(&out.join("coarse.pfm"), &result.coarse, None)?;
            formats::write_depth(&out.join("fine.pfm"), &result.fine, None)?;
            for (k, snapshot) in result.snapshots.iter().enumerate() {
                write_feedback_channels(&out, k + 1, &model, snapshot, image.width, image.height)?;
            }
            let mesh = camera_transform(&model, &result.representation)?;
            let (_, cache) = rasterize(&mesh, image.width, image.height);
            let (lighting, texcoeffs, _) =
                recover_illumination(&result.coarse, &image, &model, &cache)?;
            formats::write_recovered_illumination(
                &out.join("illumination.json"),
                &lighting,
                &texcoeffs,
            )?;
            let final_loss = result
                .traces
                .last()
                .and_then(|t| t.loss.last())
                .copied()
                .unwrap_or(f64::NAN);
            println!(
                "wrote {} (coarse fit loss {final_loss:.6e}, {} feedback rounds)",
                out.display(),
                result.snapshots.len()
            );
            Ok(())
        }

        Command::Eval {
            pred,
            gt,
            mask,
            json,
            heatmap,
        } => {
            let pred = formats::read_depth(&pred)?;
            let gt = formats::read_depth(&gt)?;
            let extra = match mask {
                Some(path) => {
                    let (w, h, m) = formats::read_mask_png(&path)?;
                    if w != pred.width || h != pred.height {
                        return Err(Error::ShapeMismatch {
                            what: "mask vs prediction",
                            expected_w: pred.width,
                            expected_h: pred.height,
                            got_w: w,
                            got_h: h,
                        });
                    }
                    m
                }
                None => vec![true; pred.depth.len()],
            };
            let stats = facemold::eval::depth_error_stats(&pred, &gt, &extra)?;
            println!(
                "mean_abs_err: {:.6}\np90_abs_err: {:.6}\npixel_count: {}",
                stats.mean_abs_err, stats.p90_abs_err, stats.pixel_count
            );
            if let Some(path) = json {
                formats::write_stats(&path, &stats)?;
                println!("wrote {}", path.display());
            }
            if let Some(path) = heatmap {
                let heat = facemold::eval::error_heatmap(&pred, &gt, &extra)?;
                formats::write_depth(&path, &heat, Some(0.0))?;
                let hi = heat.depth_range().map(|(_, hi)| hi).unwrap_or(1.0);
                let png = path.with_extension("png");
                formats::write_scalar_png16(
                    &png,
                    &facemold::raster::GrayImage::from_vec(heat.width, heat.height, heat.depth.clone()),
                    0.0,
                    hi.max(1e-12),
                )?;
                println!("wrote {} and {}", path.display(), png.display());
            }
            Ok(())
        }

        Command::Gradcheck {} => {
            let reports = facemold::gradcheck::run_all(seed)?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{:<24} max rel err {:>10.3e}  threshold {:>8.1e}  {} ({} checked, {} skipped) {}",
                    r.name,
                    r.max_rel_err,
                    r.threshold,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.checked,
                    r.skipped,
                    r.note
                );
                all_pass &= r.pass;
            }
            if all_pass {
                Ok(())
            } else {
                Err(Error::CheckFailed {
                    name: "gradient checks".into(),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            // Usage errors (unknown flags, missing values) print to stderr
            // and exit 1.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
