use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use depthprop::affinity::BilateralParams;
use depthprop::geometry::{fuse_depths, read_cameras, write_cameras, FusionConfig, PointCloud};
use depthprop::grids::io::{
    read_color_ppm, read_depth_pfm, read_normals_pfm, write_color_ppm, write_depth_pfm, write_mask_pgm,
    write_normals_pfm,
};
use depthprop::metrics::{cloud_metrics, depth_metrics, error_vs_distance, receptive_field, ReachTarget};
use depthprop::propagation::PropagationMode;
use depthprop::pyramid::{build_scale_bundle, run_coarse_to_fine, FullResInputs, PyramidConfig};
use depthprop::sampling::{sample, DetectorConfig, SamplerConfig, SamplerMode, SparseDepth};
use depthprop::synth::{corrupt_depth, gt_cloud, render_scene, Layout, SceneSpec};

mod config;

use config::{pick, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "depthprop", version, about = "Sparse depth completion by spatial propagation")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, env = "DEPTHPROP_THREADS")]
    threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene: per-view color, depth, normals, texture mask,
    /// cameras and a ground-truth cloud.
    Synth(SynthArgs),
    /// Draw sparse depth samples from a dense depth map.
    Sample(SampleArgs),
    /// Complete sparse depth.
    Complete(CompleteArgs),
    /// Fuse per-view depth maps into a point cloud.
    Fuse(FuseArgs),
    /// Score a depth map or a point cloud against ground truth.
    Eval(EvalArgs),
    /// Measure the receptive field of a propagation setting.
    Rf(RfArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene description; the layout defaults are used without one.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// box_room, two_walls or far_wall.
    #[arg(long)]
    layout: Option<String>,
    /// Ground-truth cloud samples per square meter.
    #[arg(long)]
    gt_density: Option<f64>,
    /// Fraction of valid pixels to corrupt in an extra `depth_noisy.pfm`.
    #[arg(long)]
    outliers: Option<f64>,
    /// Meters added to or removed from corrupted pixels.
    #[arg(long)]
    outlier_magnitude: Option<f64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    color: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    /// keypoint or uniform.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    response_threshold: Option<f64>,
    #[arg(long)]
    nms_radius: Option<usize>,
}

#[derive(Args, Debug)]
struct CompleteArgs {
    #[arg(long)]
    color: PathBuf,
    #[arg(long)]
    normals: PathBuf,
    #[arg(long)]
    sparse: PathBuf,
    /// Ground truth; enables the metrics in `metrics.txt`.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    scales: Option<usize>,
    /// Iterations per scale.
    #[arg(long)]
    iters: Option<usize>,
    /// Dilation at the coarsest scale.
    #[arg(long)]
    dilation: Option<u32>,
    /// Dilation added per finer scale.
    #[arg(long, allow_hyphen_values = true)]
    dilation_step: Option<i32>,
    /// hard or conf.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    sigma_color: Option<f64>,
    #[arg(long)]
    sigma_normal: Option<f64>,
    #[arg(long)]
    center_bias: Option<f64>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// One camera per line, in the order of `--depth`.
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long, required = true)]
    depth: Vec<PathBuf>,
    /// Meters.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_views: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, requires = "gt")]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Adds the error-vs-distance table.
    #[arg(long)]
    sparse: Option<PathBuf>,
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long, requires = "gt_cloud", conflicts_with = "pred")]
    pred_cloud: Option<PathBuf>,
    #[arg(long)]
    gt_cloud: Option<PathBuf>,
    /// Cloud distance threshold in meters.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct RfArgs {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    dilation: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    dilation_step: Option<i32>,
    /// Analyze the 24-iteration undilated single-scale baseline.
    #[arg(long)]
    baseline: bool,
}

struct Globals {
    seed: u64,
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = RunConfig::load(cli.config.as_deref())?;
    let threads = pick(cli.threads, file.threads, 0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")?;
    let out = pick(cli.out.clone(), file.out_dir.clone(), PathBuf::from("."));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let g = Globals { seed: pick(cli.seed, file.seed, 0), out };
    match &cli.command {
        Command::Synth(a) => synth(&g, &file, a),
        Command::Sample(a) => sample_cmd(&g, &file, a),
        Command::Complete(a) => complete(&g, &file, a),
        Command::Fuse(a) => fuse(&g, &file, a),
        Command::Eval(a) => eval(&g, &file, a),
        Command::Rf(a) => rf(&g, &file, a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(g: &Globals, file: &RunConfig, a: &SynthArgs) -> Result<()> {
    let s = &file.synth;
    let spec = match &a.spec {
        Some(p) => {
            if a.layout.is_some() {
                bail!("--spec and --layout are exclusive");
            }
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SceneSpec::parse(&text)?
        }
        None => {
            let layout: Layout = pick(a.layout.clone(), s.layout.clone(), "box_room".into()).parse()?;
            SceneSpec::default_for(layout)?
        }
    };
    let density = pick(a.gt_density, s.gt_density, 1e4);
    let outliers = pick(a.outliers, s.outliers, 0.0);
    let magnitude = pick(a.outlier_magnitude, s.outlier_magnitude, 1.0);

    let views = render_scene(&spec)?;
    for (i, v) in views.iter().enumerate() {
        let dir = g.out.join(format!("view_{i:03}"));
        fs::create_dir_all(&dir)?;
        write_color_ppm(dir.join("color.ppm"), &v.color)?;
        write_depth_pfm(dir.join("depth.pfm"), &v.depth)?;
        write_normals_pfm(dir.join("normals.pfm"), &v.normals)?;
        write_mask_pgm(dir.join("mask.pgm"), &v.texture_mask)?;
        if outliers > 0.0 {
            let noisy = corrupt_depth(&v.depth, outliers, magnitude, g.seed.wrapping_add(i as u64))?;
            write_depth_pfm(dir.join("depth_noisy.pfm"), &noisy)?;
        }
    }
    write_cameras(g.out.join("cameras.txt"), &spec.views)?;
    let cloud = gt_cloud(&spec, density)?;
    cloud.write_ply(g.out.join("gt_cloud.ply"))?;
    println!("{}: {} views of {}x{}, {} ground-truth points", spec.layout, views.len(), spec.width, spec.height, cloud.len());
    Ok(())
}

fn sample_cmd(g: &Globals, file: &RunConfig, a: &SampleArgs) -> Result<()> {
    let s = &file.sample;
    let d = SamplerConfig::default();
    let cfg = SamplerConfig {
        mode: match a.mode.as_ref().or(s.mode.as_ref()) {
            Some(m) => m.parse::<SamplerMode>()?,
            None => d.mode,
        },
        max_samples: pick(a.max_samples, s.max_samples, d.max_samples),
        rng_seed: g.seed,
        detector: DetectorConfig {
            response_threshold: pick(a.response_threshold, s.response_threshold, d.detector.response_threshold),
            nms_radius: pick(a.nms_radius, s.nms_radius, d.detector.nms_radius),
        },
    };
    let color = read_color_ppm(&a.color)?;
    let depth = read_depth_pfm(&a.depth)?;
    let sparse = sample(&depth, &color, &cfg)?;
    sparse.write(g.out.join("sparse.txt"))?;
    println!("{} samples", sparse.len());
    Ok(())
}

fn complete(g: &Globals, file: &RunConfig, a: &CompleteArgs) -> Result<()> {
    let mut cfg = PyramidConfig::default();
    let mut mode = PropagationMode::default();
    let mut params = BilateralParams::default();
    file.complete.apply(&mut cfg, &mut mode)?;
    file.complete.apply_bilateral(&mut params)?;
    cfg.n_scales = a.scales.unwrap_or(cfg.n_scales);
    cfg.iters_per_scale = a.iters.unwrap_or(cfg.iters_per_scale);
    cfg.base_dilation = a.dilation.unwrap_or(cfg.base_dilation);
    cfg.dilation_increment = a.dilation_step.unwrap_or(cfg.dilation_increment);
    if let Some(m) = &a.mode {
        mode = m.parse()?;
    }
    params.sigma_color = a.sigma_color.unwrap_or(params.sigma_color);
    params.sigma_normal = a.sigma_normal.unwrap_or(params.sigma_normal);
    params.center_bias = a.center_bias.unwrap_or(params.center_bias);
    cfg.validate()?;
    params.validate()?;

    let color = read_color_ppm(&a.color)?;
    let normals = read_normals_pfm(&a.normals)?;
    let sparse = SparseDepth::read(&a.sparse)?;
    let gt = a.gt.as_ref().map(read_depth_pfm).transpose()?;
    let inputs = FullResInputs { color: &color, normals: &normals, sparse: &sparse, gt: gt.as_ref() };
    let bundle = build_scale_bundle(&inputs, &cfg, &params)?;
    let outputs = run_coarse_to_fine(&bundle, &cfg, mode)?;
    for (k, d) in outputs.iter().enumerate() {
        write_depth_pfm(g.out.join(format!("depth_scale_{k}.pfm")), d)?;
    }
    let finest = outputs.last().expect("at least one scale");
    write_depth_pfm(g.out.join("depth.pfm"), finest)?;

    let mut kv = format!(
        "n_scales={}\niters_per_scale={}\nbase_dilation={}\ndilation_increment={}\nmode={mode}\nsamples={}\n",
        cfg.n_scales,
        cfg.iters_per_scale,
        cfg.base_dilation,
        cfg.dilation_increment,
        sparse.len()
    );
    if let Some(gt) = &gt {
        let m = depth_metrics(finest, gt)?;
        kv.push_str(&m.to_kv());
        print!("{}", m.to_table());
    }
    write_text(&g.out.join("metrics.txt"), &kv)
}

fn fuse(g: &Globals, file: &RunConfig, a: &FuseArgs) -> Result<()> {
    let d = FusionConfig::default();
    let cfg = FusionConfig {
        depth_threshold: pick(a.threshold, file.fuse.threshold, d.depth_threshold),
        min_consistent_views: pick(a.min_views, file.fuse.min_views, d.min_consistent_views),
    };
    let cameras = read_cameras(&a.cameras)?;
    if cameras.len() != a.depth.len() {
        bail!("{} cameras for {} depth maps", cameras.len(), a.depth.len());
    }
    let views = cameras
        .into_iter()
        .zip(&a.depth)
        .map(|(c, p)| Ok((c, read_depth_pfm(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let cloud = fuse_depths(&views, &cfg)?;
    cloud.write_ply(g.out.join("fused.ply"))?;
    println!("{} points", cloud.len());
    Ok(())
}

fn eval(g: &Globals, file: &RunConfig, a: &EvalArgs) -> Result<()> {
    let e = &file.eval;
    match (&a.pred, &a.gt, &a.pred_cloud, &a.gt_cloud) {
        (Some(pred), Some(gt), None, _) => {
            let pred = read_depth_pfm(pred)?;
            let gt = read_depth_pfm(gt)?;
            let m = depth_metrics(&pred, &gt)?;
            print!("{}", m.to_table());
            write_text(&g.out.join("metrics.txt"), &m.to_kv())?;
            if let Some(sp) = &a.sparse {
                let sparse = SparseDepth::read(sp)?;
                let h = error_vs_distance(&pred, &gt, &sparse, pick(a.bin_width, e.bin_width, 10.0))?;
                print!("{}", h.to_table());
                write_text(&g.out.join("distance.txt"), &h.to_kv())?;
            }
            Ok(())
        }
        (None, _, Some(pred), Some(gt)) => {
            let pred = PointCloud::read_ply(pred)?;
            let gt = PointCloud::read_ply(gt)?;
            let m = cloud_metrics(&pred, &gt, pick(a.threshold, e.cloud_threshold, 0.02))?;
            print!("{}", m.to_table());
            write_text(&g.out.join("metrics.txt"), &m.to_kv())
        }
        _ => bail!("give either --pred with --gt, or --pred-cloud with --gt-cloud"),
    }
}

fn rf(g: &Globals, file: &RunConfig, a: &RfArgs) -> Result<()> {
    let r = &file.rf;
    let target = if a.baseline {
        ReachTarget::baseline()
    } else {
        let d = PyramidConfig::default();
        ReachTarget::Pyramid(PyramidConfig {
            n_scales: pick(a.scales, r.n_scales, d.n_scales),
            iters_per_scale: pick(a.iters, r.iters_per_scale, d.iters_per_scale),
            base_dilation: pick(a.dilation, r.base_dilation, d.base_dilation),
            dilation_increment: pick(a.dilation_step, r.dilation_increment, d.dilation_increment),
        })
    };
    let width = pick(a.width, r.width, 1024);
    let height = pick(a.height, r.height, width);
    let report = receptive_field(&target, width, height)?;
    print!("{}", report.to_table());
    write_text(&g.out.join("reach.txt"), &report.to_kv())?;
    write_mask_pgm(g.out.join("reach_mask.pgm"), &report.mask)?;
    Ok(())
}
