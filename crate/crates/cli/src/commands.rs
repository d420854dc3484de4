use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vtpalm::gradient_mapper::{self, MlpConfig, MlpWeights};
use vtpalm::io;
use vtpalm::kv::KeyValues;
use vtpalm::palm_control::{self, format_log, PressScript, SwitchConfig};
use vtpalm::proximity::{self, DoubleExpModel, FitConfig};
use vtpalm::raster::{HeightMap, RasterImage};
use vtpalm::scene_sim::{self, ApproachScenario};
use vtpalm::surface_recon;
use vtpalm::tactile_calib::{self, CircleDetector, PressEntry};
use vtpalm::tactile_render::{self, Grid, LightingRig, PressSet};
use vtpalm::texture::{self, TextureConfig};
use vtpalm::Error as CoreError;

use crate::output::{resolve_input, OutputDir};
use crate::plot::{Plot, BLUE, GREY, RED};
use crate::{AnalyzeMode, Cli, Command, RenderKind};

const PLOT_SIZE: (usize, usize) = (480, 320);

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let input = |p: &Path| resolve_input(p, cli.data_dir.as_deref());
    let mut out = OutputDir::create(&cli.out)?;
    match &cli.command {
        Command::FitProximity { samples, all } => {
            let samples = input(samples);
            fit_proximity(&samples, *all, &mut out)?;
            out.finish("fit-proximity", cli.seed, &[("samples", &samples)])
        }
        Command::CalibrateTactile {
            manifest,
            config,
            clamp,
            no_refit,
        } => {
            let manifest = input(manifest);
            let config = config.as_deref().map(input);
            calibrate_tactile(
                &manifest,
                config.as_deref(),
                *clamp,
                *no_refit,
                cli.seed,
                &mut out,
            )?;
            let mut inputs = vec![("manifest", manifest.as_path())];
            if let Some(c) = &config {
                inputs.push(("config", c));
            }
            out.finish("calibrate-tactile", cli.seed, &inputs)
        }
        Command::Reconstruct {
            image,
            reference,
            weights,
            pitch,
        } => {
            let (image, reference, weights) = (input(image), input(reference), input(weights));
            reconstruct(&image, &reference, &weights, *pitch, &mut out)?;
            out.finish(
                "reconstruct",
                cli.seed,
                &[
                    ("image", &image),
                    ("reference", &reference),
                    ("weights", &weights),
                ],
            )
        }
        Command::Analyze {
            images,
            mode,
            reference,
            cutoff,
            tile,
        } => {
            let images: Vec<PathBuf> = images.iter().map(|p| input(p)).collect();
            let reference = reference.as_deref().map(input);
            analyze(
                &images,
                *mode,
                reference.as_deref(),
                *cutoff,
                *tile,
                &mut out,
            )?;
            let labels: Vec<String> = (0..images.len()).map(|i| format!("image{i}")).collect();
            let mut inputs: Vec<(&str, &Path)> = labels
                .iter()
                .map(String::as_str)
                .zip(images.iter().map(PathBuf::as_path))
                .collect();
            if let Some(r) = &reference {
                inputs.push(("reference", r));
            }
            out.finish("analyze", cli.seed, &inputs)
        }
        Command::SimulateGrasp {
            scenario,
            model,
            weights,
        } => {
            let (scenario, model, weights) = (input(scenario), input(model), input(weights));
            simulate_grasp(&scenario, &model, &weights, cli.seed, &mut out)?;
            out.finish(
                "simulate-grasp",
                cli.seed,
                &[
                    ("scenario", &scenario),
                    ("model", &model),
                    ("weights", &weights),
                ],
            )
        }
        Command::Render { kind, config } => {
            let config = config.as_deref().map(input);
            let kv = match &config {
                Some(p) => {
                    KeyValues::load(p).with_context(|| format!("reading {}", p.display()))?
                }
                None => KeyValues::new(),
            };
            render(*kind, &kv, cli.seed, &mut out)?;
            let inputs: Vec<(&str, &Path)> =
                config.iter().map(|c| ("config", c.as_path())).collect();
            out.finish("render", cli.seed, &inputs)
        }
    }
}

fn fit_proximity(samples_path: &Path, all: bool, out: &mut OutputDir) -> Result<()> {
    let samples = proximity::read_samples_csv(samples_path)
        .with_context(|| format!("reading {}", samples_path.display()))?;
    let cfg = if all {
        FitConfig::unrestricted()
    } else {
        FitConfig::default()
    };
    let fit = proximity::fit_double_exp(&samples, &cfg).context("double-exponential fit")?;
    log::info!(
        "double exponential: {} (R^2 {:.4}, RMSE {:.4} cm)",
        fit.model,
        fit.r_squared,
        fit.rmse
    );
    proximity::write_model_file(out.file("model.txt"), &fit.model)?;

    let mut report = String::from("family,params,r_squared,rmse,iterations,converged\n");
    let m = fit.model;
    let _ = writeln!(
        report,
        "double_exponential,{} {} {} {},{},{},{},{}",
        m.a(),
        m.b(),
        m.c(),
        m.d(),
        fit.r_squared,
        fit.rmse,
        fit.iterations,
        fit.converged
    );
    for (family, result) in proximity::fit_alternative_models(&samples, &cfg) {
        match result {
            Ok(r) => {
                let params: Vec<String> = r.model.params().iter().map(f64::to_string).collect();
                let _ = writeln!(
                    report,
                    "{},{},{},{},{},{}",
                    family.name(),
                    params.join(" "),
                    r.r_squared,
                    r.rmse,
                    r.iterations,
                    r.converged
                );
            }
            Err(e) => log::warn!("{} fit failed: {e}", family.name()),
        }
    }
    out.write("fit_report.csv", &report)?;

    let mut residuals = String::from("z_img,z_world_cm,predicted_cm,residual_cm\n");
    for (&(x, y), r) in fit.points.iter().zip(&fit.residuals) {
        let _ = writeln!(residuals, "{x},{y},{},{r}", y - r);
    }
    out.write("residuals.csv", &residuals)?;

    let (lo, hi) = fit
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let curve: Vec<(f64, f64)> = (0..=200)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / 200.0;
            (x, m.predict(x))
        })
        .collect();
    let fit_plot = Plot::new(PLOT_SIZE.0, PLOT_SIZE.1)
        .points(fit.points.clone(), BLUE)
        .line(curve, RED)
        .render();
    io::save_image(&fit_plot, out.file("fit.png"))?;
    let resid_plot = Plot::new(PLOT_SIZE.0, PLOT_SIZE.1)
        .points(
            fit.points
                .iter()
                .zip(&fit.residuals)
                .map(|(p, &r)| (p.0, r))
                .collect(),
            BLUE,
        )
        .hline(0.0, GREY)
        .render();
    io::save_image(&resid_plot, out.file("residuals.png"))?;
    Ok(())
}

fn calibrate_tactile(
    manifest: &Path,
    config: Option<&Path>,
    clamp: f64,
    no_refit: bool,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let mut cfg = MlpConfig {
        seed,
        ..MlpConfig::default()
    };
    if let Some(path) = config {
        cfg.apply_kv(&KeyValues::load(path)?)
            .with_context(|| format!("training config {}", path.display()))?;
    }
    let entries = tactile_calib::read_press_manifest(manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let loaded = tactile_calib::load_presses(&entries, &CircleDetector::default());
    let mut skipped = String::from("row,reason\n");
    for (row, err) in &loaded.skipped {
        log::warn!("press row {row} skipped: {err}");
        let _ = writeln!(skipped, "{row},{}", err.to_string().replace(',', ";"));
    }
    out.write("skipped.csv", &skipped)?;
    if loaded.presses.is_empty() {
        bail!("no usable presses in {}", manifest.display());
    }
    let dataset = tactile_calib::build_dataset(&loaded.presses, clamp)?;
    log::info!(
        "{} presses, {} samples",
        loaded.presses.len(),
        dataset.len()
    );
    tactile_calib::save_dataset(out.file("dataset.vtp"), &dataset)?;

    let (weights, log, refit) = if no_refit {
        let (w, l) = gradient_mapper::train(&dataset, &cfg)?;
        (w, l, None)
    } else {
        let (w, l, r) = gradient_mapper::train_and_refit(&dataset, &cfg)?;
        if r.applied {
            log::info!(
                "output refit: validation MSE {:.4} -> {:.4}",
                r.val_mse_before,
                r.val_mse_after
            );
        } else {
            log::warn!(
                "output refit did not help ({:.4}), kept trained weights",
                r.val_mse_after
            );
        }
        (w, l, Some(r))
    };
    weights.save(out.file("weights.vtpw"))?;
    log.save_csv(out.file("training_log.csv"))?;
    log::info!(
        "best epoch {} of {}, validation MSE {:.4}",
        log.best_epoch,
        log.epochs.len(),
        log.val_mse
    );
    let mut summary = KeyValues::new();
    summary.set("presses_used", loaded.presses.len());
    summary.set("presses_skipped", loaded.skipped.len());
    summary.set("samples", dataset.len());
    summary.set("train_size", log.train_size);
    summary.set("val_size", log.val_size);
    summary.set("best_epoch", log.best_epoch);
    summary.set("epochs_run", log.epochs.len());
    summary.set("stopped_early", log.stopped_early);
    summary.set("val_mse", log.val_mse);
    if let Some(r) = &refit {
        summary.set("refit_applied", r.applied);
        summary.set("refit_val_mse", r.val_mse_after);
    }
    summary.set("seed", cfg.seed);
    out.write("summary.txt", &summary.to_text())?;
    Ok(())
}

fn load_pair(image: &Path, reference: &Path) -> Result<(RasterImage, RasterImage)> {
    let img = io::load_image(image).with_context(|| format!("reading {}", image.display()))?;
    let reference =
        io::load_image(reference).with_context(|| format!("reading {}", reference.display()))?;
    if img.dims() != reference.dims() {
        bail!(
            "image is {:?} but reference is {:?} (width, height, channels)",
            img.dims(),
            reference.dims()
        );
    }
    Ok((img, reference))
}

fn save_height_outputs(h: &HeightMap, out: &mut OutputDir) -> Result<()> {
    io::save_height_map(h, out.file("height.csv"))?;
    io::save_image(&surface_recon::height_image(h), out.file("height.png"))?;
    io::save_image(&surface_recon::normal_z_image(h), out.file("normal_z.png"))?;
    Ok(())
}

fn reconstruct(
    image: &Path,
    reference: &Path,
    weights: &Path,
    pitch: f64,
    out: &mut OutputDir,
) -> Result<()> {
    if !(pitch > 0.0) {
        bail!("pixel pitch must be positive, got {pitch}");
    }
    let (img, reference) = load_pair(image, reference)?;
    let weights =
        MlpWeights::load(weights).with_context(|| format!("reading {}", weights.display()))?;
    let mut summary = KeyValues::new();
    let h = match palm_control::reconstruct_contact(&img, &reference, &weights, pitch) {
        Ok(h) => h,
        Err(CoreError::InsufficientSupport { pixels, .. }) => {
            log::warn!("no contact region found ({pixels} changed pixels); writing a flat map");
            summary.set("contact", false);
            HeightMap::flat(img.width(), img.height(), pitch)?
        }
        Err(e) => return Err(e.into()),
    };
    let z = h.z();
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    summary.set("apex_depth_mm", hi - lo);
    summary.set("pixel_pitch_mm", pitch);
    save_height_outputs(&h, out)?;
    out.write("summary.txt", &summary.to_text())?;
    Ok(())
}

fn stem(path: &Path, i: usize) -> String {
    let s = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    format!("{i:02}_{s}")
}

fn analyze(
    images: &[PathBuf],
    mode: AnalyzeMode,
    reference: Option<&Path>,
    cutoff: f64,
    tile: usize,
    out: &mut OutputDir,
) -> Result<()> {
    let reference = reference
        .map(|r| io::load_image(r).with_context(|| format!("reading {}", r.display())))
        .transpose()?;
    let mut fields = Vec::with_capacity(images.len());
    for path in images {
        let mut img =
            io::load_image(path).with_context(|| format!("reading {}", path.display()))?;
        if let Some(r) = &reference {
            img = img
                .difference(r)
                .with_context(|| format!("{} against the reference", path.display()))?;
        }
        fields.push(img.to_grayscale().to_field()?);
    }
    match mode {
        AnalyzeMode::Roughness => {
            let mut reports = Vec::new();
            for (i, (path, f)) in images.iter().zip(&fields).enumerate() {
                let r = texture::amplitude_spectrum_with(f, cutoff)?;
                io::save_image(
                    &r.to_image(),
                    out.file(&format!("spectrum_{}.png", stem(path, i))),
                )?;
                log::info!(
                    "{}: high-frequency ratio {:.4}",
                    path.display(),
                    r.high_freq_ratio
                );
                reports.push((stem(path, i), r));
            }
            let rows: Vec<(String, &texture::SpectrumReport)> =
                reports.iter().map(|(n, r)| (n.clone(), r)).collect();
            out.write("roughness.csv", &texture::spectrum_csv(&rows))?;
        }
        AnalyzeMode::Texture => {
            let cfg = TextureConfig {
                tile,
                ..TextureConfig::default()
            };
            let mut table = format!("name,{}\n", cfg.feature_names().join(","));
            for (i, (path, f)) in images.iter().zip(&fields).enumerate() {
                let feats = texture::texture_features(&f.map(|x| x.clamp(0.0, 1.0)), &cfg)?;
                let vals: Vec<String> = feats.as_vec().iter().map(f64::to_string).collect();
                let _ = writeln!(table, "{},{}", stem(path, i), vals.join(","));
            }
            out.write("texture.csv", &table)?;
            let pairs: Vec<usize> = if fields.len() == 1 {
                vec![0]
            } else {
                (1..fields.len()).collect()
            };
            for k in pairs {
                match texture::discriminate(&fields[0], &fields[k], &cfg) {
                    Ok(d) => {
                        log::info!(
                            "{} vs {}: largest margin {:.3}",
                            images[0].display(),
                            images[k].display(),
                            d.max_margin()
                        );
                        out.write(
                            &format!("discrimination_{:02}_vs_{:02}.csv", 0, k),
                            &d.to_csv(),
                        )?;
                    }
                    Err(CoreError::ZeroVariance) => {
                        log::warn!(
                            "{} vs {}: every texture feature has zero variance; no margin reported",
                            images[0].display(),
                            images[k].display()
                        );
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    Ok(())
}

fn simulate_grasp(
    scenario_path: &Path,
    model: &Path,
    weights: &Path,
    seed: u64,
    out: &mut OutputDir,
) -> Result<()> {
    let kv = KeyValues::load(scenario_path)
        .with_context(|| format!("reading {}", scenario_path.display()))?;
    let mut scenario = ApproachScenario {
        speed_cmps: 8.0,
        seed,
        ..ApproachScenario::default()
    };
    scenario.apply_kv(&kv).context("scenario settings")?;
    let mut cfg = SwitchConfig::default();
    cfg.apply_kv(&kv).context("switch settings")?;
    let mut script = PressScript {
        seed,
        ..PressScript::default()
    };
    script.apply_kv(&kv).context("press settings")?;
    let model = proximity::read_model_file(model)
        .with_context(|| format!("reading {}", model.display()))?;
    let weights =
        MlpWeights::load(weights).with_context(|| format!("reading {}", weights.display()))?;
    if (scenario.frame_rate - cfg.sense_rate_fps).abs() > 1e-9 && kv.get("frame_rate").is_none() {
        scenario.frame_rate = cfg.sense_rate_fps;
    }

    let report = palm_control::run_grasp_scenario(&scenario, &script, &model, &weights, &cfg)?;
    log::info!(
        "final mode {}, ranging accuracy {:.3}, tracking MAE {:.3} cm",
        report.final_mode,
        report.ranging_accuracy(),
        report.tracking.mae_cm
    );
    out.write("commands.log", &format_log(&report.commands))?;
    out.write("frames.csv", &report.frames_csv())?;
    let mut checkpoints = String::from("target_cm,frame,abs_error_cm\n");
    for c in &report.tracking.checkpoints {
        let _ = writeln!(
            checkpoints,
            "{},{},{}",
            c.target_cm, c.frame, c.abs_error_cm
        );
    }
    out.write("checkpoints.csv", &checkpoints)?;
    out.write("summary.txt", &report.summary_kv().to_text())?;

    let truth: Vec<(f64, f64)> = report
        .frames
        .iter()
        .map(|f| (f.timestamp_s, f.truth_cm))
        .collect();
    let measured: Vec<(f64, f64)> = report
        .frames
        .iter()
        .filter_map(|f| f.measured_cm.map(|m| (f.timestamp_s, m)))
        .collect();
    let mut plot = Plot::new(PLOT_SIZE.0, PLOT_SIZE.1)
        .line(truth, GREY)
        .points(measured, BLUE)
        .hline(cfg.distance_threshold_cm, GREY);
    if let Some(sw) = &report.switch {
        plot = plot.vline(sw.timestamp_s, RED);
    }
    io::save_image(&plot.render(), out.file("distance.png"))?;
    if let Some(h) = &report.reconstruction {
        save_height_outputs(h, out)?;
    }
    Ok(())
}

fn rig_from(kv: &KeyValues) -> Result<LightingRig> {
    let (mut elevation, mut gain, mut ambient, mut noise, mut falloff) =
        (45.0, 0.6, 0.2, 0.01, 0.10);
    kv.read_into("elevation", &mut elevation)?;
    kv.read_into("gain", &mut gain)?;
    kv.read_into("ambient", &mut ambient)?;
    kv.read_into("noise", &mut noise)?;
    kv.read_into("falloff", &mut falloff)?;
    let rig = LightingRig::from_angles(
        [0.0, 120.0, 240.0],
        elevation,
        gain,
        ambient,
        noise,
        falloff,
    );
    rig.validate()?;
    Ok(rig)
}

fn grid_from(kv: &KeyValues) -> Result<Grid> {
    let mut g = Grid::new(256, 192, 0.05);
    kv.read_into("width", &mut g.width)?;
    kv.read_into("height", &mut g.height)?;
    kv.read_into("pitch", &mut g.pixel_pitch)?;
    if g.width < 2 || g.height < 2 || !(g.pixel_pitch > 0.0) {
        bail!("grid must be at least 2x2 with a positive pitch");
    }
    Ok(g)
}

fn render(kind: RenderKind, kv: &KeyValues, seed: u64, out: &mut OutputDir) -> Result<()> {
    let get = |key: &str, default: f64| -> Result<f64> {
        let mut v = default;
        kv.read_into(key, &mut v)?;
        Ok(v)
    };
    match kind {
        RenderKind::ProximitySamples => {
            let runs = get("runs", 10.0)? as usize;
            let (lo, hi, step) = (
                get("min_distance", 10.0)?,
                get("max_distance", 50.0)?,
                get("step", 2.5)?,
            );
            if !(step > 0.0 && lo <= hi) {
                bail!("distance range must be non-empty with a positive step");
            }
            let distances: Vec<f64> = (0..)
                .map(|i| lo + step * i as f64)
                .take_while(|&d| d <= hi + 1e-9)
                .collect();
            let samples = scene_sim::synthesize_calibration(
                &DoubleExpModel::REFERENCE,
                runs,
                &distances,
                get("noise", 2.0)?,
                seed,
            )?;
            proximity::write_samples_csv(out.file("samples.csv"), &samples)?;
            return Ok(());
        }
        RenderKind::Presses => {
            let set = PressSet {
                count: get("count", 30.0)? as usize,
                grid: grid_from(kv)?,
                sphere_radius_mm: get("radius", 2.5)?,
                depth_range_mm: (get("depth_min", 0.3)?, get("depth_max", 1.0)?),
            };
            let rig = rig_from(kv)?;
            let presses = set.render(&rig, seed)?;
            let mut entries = Vec::with_capacity(presses.len());
            let mut truth = String::from("index,center_u,center_v,depth_mm,contact_radius_mm\n");
            for (i, p) in presses.iter().enumerate() {
                let (img, rf) = (format!("press_{i:02}.png"), format!("reference_{i:02}.png"));
                io::save_image(&p.image, out.file(&img))?;
                io::save_image(&p.reference, out.file(&rf))?;
                let g = p.geometry;
                let _ = writeln!(
                    truth,
                    "{i},{},{},{},{}",
                    g.center_px.0, g.center_px.1, g.depth_mm, g.contact_radius_mm
                );
                entries.push(PressEntry {
                    image: img.into(),
                    reference: rf.into(),
                    pixel_pitch: g.pixel_pitch,
                    sphere_radius: g.sphere_radius_mm,
                    known: None,
                });
            }
            tactile_calib::write_press_manifest(out.file("presses.csv"), &entries)?;
            out.write("truth.csv", &truth)?;
            tactile_render::write_sidecar(out.file("render.txt"), &rig, None, seed)?;
            return Ok(());
        }
        _ => {}
    }

    let grid = grid_from(kv)?;
    let rig = rig_from(kv)?;
    let flat = HeightMap::flat(grid.width, grid.height, grid.pixel_pitch)?;
    let mut press = None;
    let height = match kind {
        RenderKind::Press => {
            let r = get("radius", 2.5)?;
            let depth = get("depth", 0.6)?;
            let center = (
                get("center_u", grid.width as f64 / 2.0)?,
                get("center_v", grid.height as f64 / 2.0)?,
            );
            let (h, r_star) = tactile_render::make_height_sphere_press(r, depth, center, grid)?;
            press = Some(tactile_render::PressGeometry {
                center_px: center,
                sphere_radius_mm: r,
                depth_mm: depth,
                contact_radius_mm: r_star,
                pixel_pitch: grid.pixel_pitch,
            });
            h
        }
        RenderKind::Rough => {
            let grit = match kv.get("mesh") {
                Some(_) => 25.4 / get("mesh", 0.0)?,
                None => get("grit", 0.1)?,
            };
            tactile_render::make_height_rough(grit, get("amplitude", 0.01)?, grid, seed)?
        }
        RenderKind::Dimples => tactile_render::make_height_dimples(
            get("spacing", 0.5)?,
            get("dimple_radius", 0.15)?,
            get("dimple_depth", 0.02)?,
            grid,
            seed,
        )?,
        RenderKind::Presses | RenderKind::ProximitySamples => unreachable!("handled above"),
    };
    // Image and reference get distinct noise streams.
    let image = tactile_render::render(&height, &rig, seed)?;
    let reference = tactile_render::render(&flat, &rig, seed ^ 0x5a5a_5a5a)?;
    io::save_image(&image, out.file("image.png"))?;
    io::save_image(&reference, out.file("reference.png"))?;
    io::save_height_map(&height, out.file("height_truth.csv"))?;
    tactile_render::write_sidecar(out.file("render.txt"), &rig, press.as_ref(), seed)?;
    Ok(())
}
