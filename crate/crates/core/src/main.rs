use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use nlr::evaluate::{chamfer_one_directional, masked_psnr, EvalReport, Psnr, ViewScore};
use nlr::exporter::{
    bake_textures, generate_texture_cameras, marching_cubes, read_bundle, sha256_hex, write_bundle,
    ExportBundle, TextureLevel, DEFAULT_ISO,
};
use nlr::geometry::{Camera, Mat4};
use nlr::lumigraph::{render_view, LumigraphOptions};
use nlr::render::render_neural;
use nlr::scene_io::{generate_synthetic, load_scene, save_png, write_scene, CameraLayout, SynthSpec};
use nlr::sdf::AnalyticShape;
use nlr::trainer::{load_checkpoint, train, TrainConfig};
use nlr::tracer::TraceConfig;

#[derive(Parser)]
#[command(name = "nlr", version, about = "Neural lumigraph rendering pipeline")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file; `--set` overrides are applied on top.
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=1e-4` or `--set field.hidden_width=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(short = 'o', long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view scene.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["sphere", "torus", "box"])]
        shape: Option<String>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        size: Option<u32>,
        #[arg(long, value_parser = ["ring", "grid"])]
        layout: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the SDF and radiance networks to a scene.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(short = 's', long)]
        scene: PathBuf,
        /// Start from the desk-scale defaults instead of the full-scale ones.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sphere-trace the trained fields from the scene cameras.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short = 's', long)]
        scene: PathBuf,
    },
    /// Extract the mesh and bake projective textures into a bundle.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene whose cameras seed the texture poses.
        #[arg(short = 's', long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long, default_value_t = DEFAULT_ISO)]
        iso: f64,
        /// Texture density: 1x, 2x or 3x.
        #[arg(long, default_value = "1x")]
        level: String,
        /// Comma-separated scene views to use as base poses (default: all).
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[arg(long)]
        texture_size: Option<u32>,
    },
    /// Render an exported bundle with lumigraph blending.
    LumiRender {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Render at these scene cameras.
        #[arg(short = 's', long)]
        scene: Option<PathBuf>,
        /// JSON list of row-major view matrices (projection from the first texture).
        #[arg(long)]
        camera_path: Option<PathBuf>,
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        /// Paint pixels no texture sees magenta.
        #[arg(long)]
        debug: bool,
    },
    /// Masked PSNR against scene images and Chamfer against the synthetic shape.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(short = 's', long)]
        scene: PathBuf,
        #[arg(long, required_unless_present = "bundle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate lumigraph renders of this bundle instead of neural renders.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Comma-separated views (default: all).
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        /// Marching-cubes resolution for the Chamfer distance (0 disables).
        #[arg(long, default_value_t = 256)]
        mesh_resolution: usize,
    },
    /// Time neural and lumigraph rendering and report model size.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        size: u32,
        #[arg(long, default_value_t = 5)]
        frames: usize,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

type Res<T> = Result<T, Failure>;

fn runtime<E: std::fmt::Display>(ctx: &str) -> impl Fn(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{ctx}: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Sets `path` (dot-separated) in a JSON object to `raw`, parsed as JSON when
/// possible and as a string otherwise.
fn apply_set(root: &mut Value, assignment: &str) -> Res<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::Usage(format!("unknown config key {key:?}")))?;
        if !obj.contains_key(*p) {
            return Err(Failure::Usage(format!("unknown config key {key:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*p).unwrap();
    }
    Ok(())
}

/// Reports the first key in `given` that `resolved` does not contain.
fn unknown_key(given: &Value, resolved: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(g), Value::Object(r)) = (given, resolved) else {
        return None;
    };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => return Some(path),
            Some(rv) => {
                if let Some(bad) = unknown_key(v, rv, &path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}

/// Layered config: defaults, then the file, then `--set` overrides.
fn resolve_config<T: Serialize + DeserializeOwned>(base: T, common: &Common) -> Res<T> {
    let mut value = serde_json::to_value(&base).expect("config serializes");
    let mut given = Value::Object(Default::default());
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        merge(&mut value, &file);
        given = file;
    }
    for s in &common.sets {
        apply_set(&mut value, s)?;
        if let Some((k, _)) = s.split_once('=') {
            let mut node = &mut given;
            for p in k.split('.') {
                if !node.is_object() {
                    *node = Value::Object(Default::default());
                }
                node = node.as_object_mut().unwrap().entry(p.to_string()).or_insert(Value::Null);
            }
        }
    }
    let cfg: T = serde_json::from_value(value).map_err(|e| Failure::Usage(format!("config: {e}")))?;
    let resolved = serde_json::to_value(&cfg).expect("config serializes");
    if let Some(bad) = unknown_key(&given, &resolved, "") {
        return Err(Failure::Usage(format!("unknown config key {bad:?}")));
    }
    Ok(cfg)
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    // enum-valued keys are replaced wholesale
                    Some(dv) if dv.is_object() && v.is_object() && !is_variant(dv, v) => merge(dv, v),
                    _ => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

fn is_variant(a: &Value, b: &Value) -> bool {
    let tag = |v: &Value| v.get("kind").cloned();
    let single = |v: &Value| v.as_object().filter(|o| o.len() == 1).map(|o| o.keys().next().cloned());
    tag(a).is_some() || tag(b).is_some() || (single(a).is_some() && single(a) != single(b))
}

fn build_hash() -> String {
    std::env::current_exe()
        .and_then(fs::read)
        .map(|b| sha256_hex(&b)[..16].to_string())
        .unwrap_or_else(|_| "unknown".into())
}

fn write_manifest(out: &Path, command: &str, config: Value) -> Res<()> {
    fs::create_dir_all(out).map_err(runtime("output directory"))?;
    let m = json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "build": build_hash(),
        "threads": rayon::current_num_threads(),
        "config": config,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m).unwrap()).map_err(runtime("manifest"))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::Synth {
            common,
            shape,
            views,
            size,
            layout,
            seed,
        } => {
            let mut spec = resolve_config(SynthSpec::default(), &common)?;
            match shape.as_deref() {
                Some("sphere") => spec.shape = AnalyticShape::Sphere { radius: 0.5 },
                Some("torus") => spec.shape = AnalyticShape::Torus { major: 0.5, minor: 0.2 },
                Some("box") => spec.shape = AnalyticShape::Box { half: [0.4, 0.3, 0.35] },
                _ => {}
            }
            match layout.as_deref() {
                Some("ring") => spec.layout = CameraLayout::Ring { elevation_deg: 20.0 },
                Some("grid") => {
                    spec.layout = CameraLayout::Grid {
                        center_azimuth_deg: 0.0,
                        azimuth_step_deg: 40.0,
                        elevation_deg: 20.0,
                    };
                    spec.views = 6;
                }
                _ => {}
            }
            spec.views = views.unwrap_or(spec.views);
            spec.size = size.unwrap_or(spec.size);
            spec.seed = seed.unwrap_or(spec.seed);
            write_manifest(&common.out, "synth", to_value(&spec))?;
            let scene = generate_synthetic(&spec).map_err(runtime("synth"))?;
            write_scene(&common.out, &scene).map_err(runtime("synth"))?;
            fs::write(common.out.join("synth.json"), serde_json::to_string_pretty(&spec).unwrap())
                .map_err(runtime("synth"))?;
            println!("wrote {} views to {}", scene.views.len(), common.out.display());
        }
        Cmd::Train {
            common,
            scene,
            desk,
            seed,
            resume,
        } => {
            let base = if desk { TrainConfig::desk() } else { TrainConfig::default() };
            let mut cfg = resolve_config(base, &common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            write_manifest(&common.out, "train", to_value(&cfg))?;
            let scene = load_scene(&scene).map_err(runtime("scene_io"))?;
            let out = train(&scene, &cfg, &common.out, resume).map_err(runtime("trainer"))?;
            println!(
                "trained {} batches in {:.1}s; last loss {:?}",
                out.batches_run, out.seconds, out.last_terms
            );
        }
        Cmd::Render {
            common,
            checkpoint,
            scene,
        } => {
            let trace = resolve_config(TraceConfig::default(), &common)?;
            write_manifest(&common.out, "render", to_value(&trace))?;
            let model = load_checkpoint(&checkpoint).map_err(runtime("checkpoint"))?;
            let scene = load_scene(&scene).map_err(runtime("scene_io"))?;
            for (i, v) in scene.views.iter().enumerate() {
                let f = render_neural(&model, &v.camera, &trace);
                save_png(&common.out.join(format!("render_{i:03}.png")), &f.image).map_err(runtime("render"))?;
            }
            println!("rendered {} views", scene.views.len());
        }
        Cmd::Export {
            common,
            checkpoint,
            scene,
            resolution,
            iso,
            level,
            views,
            texture_size,
        } => {
            let trace = resolve_config(TraceConfig::default(), &common)?;
            let level = TextureLevel::parse(&level)
                .ok_or_else(|| Failure::Usage(format!("--level must be 1x, 2x or 3x, got {level:?}")))?;
            write_manifest(
                &common.out,
                "export",
                json!({"trace": to_value(&trace), "resolution": resolution, "iso": iso}),
            )?;
            let bytes = fs::read(&checkpoint).map_err(runtime("checkpoint"))?;
            let model = load_checkpoint(&checkpoint).map_err(runtime("checkpoint"))?;
            let scene = load_scene(&scene).map_err(runtime("scene_io"))?;
            let mut base: Vec<Camera> = if views.is_empty() {
                scene.views.iter().map(|v| v.camera.clone()).collect()
            } else {
                let mut out = Vec::new();
                for &i in &views {
                    let v = scene
                        .views
                        .get(i)
                        .ok_or_else(|| Failure::Usage(format!("scene has no view {i}")))?;
                    out.push(v.camera.clone());
                }
                out
            };
            if let Some(s) = texture_size {
                base = base
                    .iter()
                    .map(|c| c.with_size(s, s))
                    .collect::<Result<_, _>>()
                    .map_err(runtime("exporter"))?;
            }
            let cameras = generate_texture_cameras(&base, level).map_err(runtime("exporter"))?;
            let mesh = marching_cubes(&model.sdf, resolution, iso).map_err(runtime("exporter"))?;
            let frames = bake_textures(&model, &cameras, &trace);
            let bundle = ExportBundle::new(mesh, frames, cameras, iso, resolution, sha256_hex(&bytes));
            write_bundle(&common.out, &bundle).map_err(runtime("exporter"))?;
            println!(
                "exported {} vertices, {} triangles, {} textures",
                bundle.mesh.vertices.len(),
                bundle.mesh.triangles.len(),
                bundle.len()
            );
        }
        Cmd::LumiRender {
            common,
            bundle,
            scene,
            camera_path,
            width,
            height,
            debug,
        } => {
            let opts = LumigraphOptions {
                debug,
                ..LumigraphOptions::default()
            };
            write_manifest(
                &common.out,
                "lumi-render",
                json!({"k": opts.k, "bias": opts.bias, "debug": debug}),
            )?;
            let bundle = read_bundle(&bundle).map_err(runtime("exporter"))?;
            let cameras: Vec<Camera> = match (&scene, &camera_path) {
                (Some(s), None) => load_scene(s)
                    .map_err(runtime("scene_io"))?
                    .views
                    .into_iter()
                    .map(|v| v.camera)
                    .collect(),
                (None, Some(p)) => {
                    let text = fs::read_to_string(p).map_err(runtime("camera path"))?;
                    let views: Vec<[f64; 16]> = serde_json::from_str(&text).map_err(runtime("camera path"))?;
                    let proto = bundle
                        .cameras
                        .first()
                        .ok_or_else(|| Failure::Runtime("bundle has no cameras".into()))?;
                    views
                        .iter()
                        .map(|v| {
                            Camera::new(Mat4::from_row_slice(v), *proto.proj(), proto.width(), proto.height())
                        })
                        .collect::<Result<_, _>>()
                        .map_err(runtime("camera path"))?
                }
                _ => return Err(Failure::Usage("give exactly one of --scene or --camera-path".into())),
            };
            for (i, c) in cameras.iter().enumerate() {
                let (w, h) = (width.unwrap_or(c.width()), height.unwrap_or(c.height()));
                let f = render_view(&bundle, c, w, h, &opts).map_err(runtime("lumigraph"))?;
                save_rgba(&common.out.join(format!("lumi_{i:03}.png")), &f).map_err(runtime("lumigraph"))?;
            }
            println!("rendered {} frames", cameras.len());
        }
        Cmd::Eval {
            common,
            scene,
            checkpoint,
            bundle,
            views,
            mesh_resolution,
        } => {
            let trace = resolve_config(TraceConfig::default(), &common)?;
            write_manifest(&common.out, "eval", to_value(&trace))?;
            let scene_dir = scene;
            let scene = load_scene(&scene_dir).map_err(runtime("scene_io"))?;
            let views: Vec<usize> = if views.is_empty() { (0..scene.views.len()).collect() } else { views };
            if let Some(&bad) = views.iter().find(|&&i| i >= scene.views.len()) {
                return Err(Failure::Usage(format!("scene has no view {bad}")));
            }
            let mut timing = BTreeMap::new();
            let mut scores = Vec::new();
            let mut chamfer = None;
            let t = Instant::now();
            if let Some(b) = &bundle {
                let bundle = read_bundle(b).map_err(runtime("exporter"))?;
                for &i in &views {
                    let v = &scene.views[i];
                    let f = render_view(&bundle, &v.camera, v.camera.width(), v.camera.height(), &Default::default())
                        .map_err(runtime("lumigraph"))?;
                    let p = masked_psnr(&f.image, &v.image, &v.mask).map_err(runtime("evaluate"))?;
                    scores.push(ViewScore { view: i, psnr: Psnr(p) });
                }
                timing.insert("lumigraph_render".into(), t.elapsed().as_secs_f64());
            } else if let Some(c) = &checkpoint {
                let model = load_checkpoint(c).map_err(runtime("checkpoint"))?;
                for &i in &views {
                    let v = &scene.views[i];
                    let f = render_neural(&model, &v.camera, &trace);
                    let p = masked_psnr(&f.image, &v.image, &v.mask).map_err(runtime("evaluate"))?;
                    scores.push(ViewScore { view: i, psnr: Psnr(p) });
                }
                timing.insert("neural_render".into(), t.elapsed().as_secs_f64());
                let spec_path = scene_dir.join("synth.json");
                if mesh_resolution > 0 && spec_path.exists() {
                    let text = fs::read_to_string(&spec_path).map_err(runtime("synth spec"))?;
                    let spec: SynthSpec = serde_json::from_str(&text).map_err(runtime("synth spec"))?;
                    let t = Instant::now();
                    let mesh = marching_cubes(&model.sdf, mesh_resolution, DEFAULT_ISO).map_err(runtime("exporter"))?;
                    timing.insert("marching_cubes".into(), t.elapsed().as_secs_f64());
                    let t = Instant::now();
                    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
                    let pts = spec.shape.surface_samples(10_000, &mut rng);
                    chamfer = Some(chamfer_one_directional(&pts, &mesh).map_err(runtime("evaluate"))?);
                    timing.insert("chamfer".into(), t.elapsed().as_secs_f64());
                }
            }
            let report = EvalReport::new(scores, chamfer, timing);
            let text = serde_json::to_string_pretty(&report).unwrap();
            fs::write(common.out.join("eval_report.json"), &text).map_err(runtime("evaluate"))?;
            println!("{text}");
        }
        Cmd::Bench {
            common,
            checkpoint,
            bundle,
            size,
            frames,
        } => {
            let trace = resolve_config(TraceConfig::default(), &common)?;
            write_manifest(&common.out, "bench", json!({"trace": to_value(&trace), "size": size, "frames": frames}))?;
            let mb = fs::metadata(&checkpoint).map_err(runtime("checkpoint"))?.len() as f64 / 1e6;
            let model = load_checkpoint(&checkpoint).map_err(runtime("checkpoint"))?;
            let cam = Camera::look_at(
                nlr::geometry::Vec3::new(0.0, 0.5, 2.5),
                nlr::geometry::Vec3::zeros(),
                nlr::geometry::Vec3::y(),
                40.0,
                size,
                size,
            )
            .map_err(runtime("bench"))?;
            let t = Instant::now();
            let _ = render_neural(&model, &cam, &trace);
            let neural = t.elapsed().as_secs_f64();
            let mut report = json!({
                "threads": rayon::current_num_threads(),
                "size": size,
                "neural_seconds_per_frame": neural,
                "checkpoint_mb": mb,
                "parameters": model.param_count(),
            });
            println!("neural render: {neural:.3} s/frame at {size}x{size}");
            println!("checkpoint size: {mb:.3} MB ({} parameters)", model.param_count());
            if let Some(b) = &bundle {
                let bundle = read_bundle(b).map_err(runtime("exporter"))?;
                let opts = LumigraphOptions::default();
                let _ = render_view(&bundle, &cam, size, size, &opts).map_err(runtime("lumigraph"))?;
                let t = Instant::now();
                for _ in 0..frames.max(1) {
                    let _ = render_view(&bundle, &cam, size, size, &opts).map_err(runtime("lumigraph"))?;
                }
                let fps = frames.max(1) as f64 / t.elapsed().as_secs_f64();
                report["lumigraph_fps"] = json!(fps);
                report["textures"] = json!(bundle.len());
                println!("lumigraph: {fps:.2} fps at {size}x{size} with {} textures", bundle.len());
            }
            fs::write(common.out.join("bench.json"), serde_json::to_string_pretty(&report).unwrap())
                .map_err(runtime("bench"))?;
        }
    }
    Ok(())
}

fn save_rgba(path: &Path, f: &nlr::lumigraph::LumiFrame) -> Result<(), image::ImageError> {
    let (w, h) = (f.image.width, f.image.height);
    let img = image::RgbaImage::from_fn(w, h, |x, y| {
        let k = (y * w + x) as usize;
        let c = f.image.data[k].map(|v| nlr::scene_io::encode_u8(v as f64));
        image::Rgba([c[0], c[1], c[2], if f.alpha[k] { 255 } else { 0 }])
    });
    img.save(path)
}
