use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};

use anyhow::{Context, Result};
use rangeseg::evaluation::{ConfusionMatrix, EvalReport};
use rangeseg::frame_io::{read_frame, read_label_image, write_frame, write_label_image};
use rangeseg::kitti_io::{list_files, read_labels, read_point_cloud, write_labels};
use rangeseg::network::Init;
use rangeseg::normals::compute_normals;
use rangeseg::pipeline::{benchmark as run_benchmark, split_halo};
use rangeseg::projection::spherical_project;
use rangeseg::quantization::calibrate;
use rangeseg::receptive_field::ReceptiveField;
use rangeseg::synthetic::{generate, SceneConfig};
use rangeseg::weights::{load_weights, save_weights, store_quant_params, Manifest};
use rangeseg::{postprocess, ClassRemap, ErrorKind, Model, Pipeline, PipelineConfig, PointCloudScan};

use crate::GlobalOpts;

/// A missing or inconsistent command-line flag.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.downcast_ref::<rangeseg::Error>().map(|e| e.kind()) {
        Some(ErrorKind::Config) => 3,
        _ => 2,
    }
}

/// The error chain, skipping causes already spelled out by their parent.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
    }
    out
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(o: &GlobalOpts) -> Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = &o.weights {
        cfg.paths.weights = Some(w.clone());
    }
    if let Some(p) = o.power_watts {
        cfg.power_watts = Some(p);
    }
    if let Some(s) = o.split_cores {
        cfg.split_cores = s;
    }
    if let Some(k) = o.k {
        cfg.patch.k = k;
    }
    if let Some(m) = &o.method {
        cfg.patch.method = m.clone();
    }
    if o.quantized {
        cfg.quantized = true;
    }
    if o.halo.is_some() {
        cfg.halo = o.halo;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_remap(cfg: &PipelineConfig) -> Result<ClassRemap> {
    Ok(match &cfg.paths.remap {
        Some(p) => ClassRemap::load(p)?,
        None => ClassRemap::semantic_kitti(),
    })
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| usage(format!("`{cmd}` needs --{flag}")))
}

/// Files with `ext` under `input`, each with its path relative to `input`.
fn inputs(input: &Path, ext: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        let files = list_files(input, ext)?;
        Ok(files
            .into_iter()
            .map(|f| {
                let rel = f.strip_prefix(input).unwrap_or(&f).to_path_buf();
                (f, rel)
            })
            .collect())
    } else {
        let name = input
            .file_name()
            .ok_or_else(|| usage(format!("bad input path {}", input.display())))?;
        Ok(vec![(input.to_path_buf(), PathBuf::from(name))])
    }
}

/// `velodyne/` becomes `predictions/`, mirroring the benchmark layout.
fn prediction_rel(rel: &Path) -> PathBuf {
    rel.components()
        .map(|c| match c {
            Component::Normal(s) if s == "velodyne" => Component::Normal("predictions".as_ref()),
            other => other,
        })
        .collect()
}

fn out_file(out: &Path, rel: &Path, ext: &str) -> Result<PathBuf> {
    let p = out.join(rel).with_extension(ext);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(p)
}

fn load_pipeline(cfg: PipelineConfig) -> Result<Pipeline> {
    if cfg.paths.weights.is_none() {
        return Err(usage("this command needs --weights (or paths.weights in the config)"));
    }
    Ok(Pipeline::from_config(cfg)?)
}

fn scans_or_synthetic(o: &GlobalOpts, cfg: &PipelineConfig) -> Result<Vec<PointCloudScan>> {
    match &o.input {
        Some(input) => {
            let files = inputs(input, "bin")?;
            if files.is_empty() {
                return Err(rangeseg::Error::Input(format!("no .bin scans under {}", input.display())).into());
            }
            files.iter().map(|(f, _)| Ok(read_point_cloud(f)?)).collect()
        }
        None => {
            let p = &cfg.projection;
            let scene = SceneConfig::for_image(p.height, p.width, p.fov_up, p.fov_down);
            Ok((0..o.frames.max(1) as u64).map(|i| generate(&scene, o.seed + i).scan).collect())
        }
    }
}

pub fn project(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let input = require(&o.input, "input", "project")?;
    let out = require(&o.output, "output", "project")?;
    let files = inputs(input, "bin")?;
    for (file, rel) in &files {
        let scan = read_point_cloud(file)?;
        let (img, map) = spherical_project(&scan, &cfg.projection)?;
        write_frame(&img, &map, out_file(out, rel, "rv")?)?;
        if o.pgm {
            img.write_range_pgm(out_file(out, rel, "pgm")?)?;
        }
    }
    println!("projected {} scans", files.len());
    Ok(())
}

pub fn normals(o: &GlobalOpts) -> Result<()> {
    let input = require(&o.input, "input", "normals")?;
    let out = require(&o.output, "output", "normals")?;
    let files = inputs(input, "rv")?;
    for (file, rel) in &files {
        let (img, map) = read_frame(file)?;
        write_frame(&compute_normals(&img), &map, out_file(out, rel, "rv")?)?;
    }
    println!("estimated normals for {} frames", files.len());
    Ok(())
}

pub fn infer(o: &GlobalOpts) -> Result<()> {
    let input = require(&o.input, "input", "infer")?;
    let out = require(&o.output, "output", "infer")?;
    let pipeline = load_pipeline(load_config(o)?)?;
    let files = inputs(input, "rv")?;
    for (file, rel) in &files {
        let (img, _) = read_frame(file)?;
        write_label_image(&pipeline.infer(&img)?, out_file(out, rel, "lbl")?)?;
    }
    println!("segmented {} frames with the {} backend", files.len(), pipeline.backend_name());
    Ok(())
}

pub fn postprocess(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let input = require(&o.input, "input", "postprocess")?;
    let labels = require(&o.labels, "labels", "postprocess")?;
    let out = require(&o.output, "output", "postprocess")?;
    let remap = load_remap(&cfg)?;
    let post = postprocess::from_config(&cfg.patch)?;
    let files = inputs(input, "rv")?;
    for (file, rel) in &files {
        let (img, map) = read_frame(file)?;
        let lbl_path = if labels.is_dir() {
            labels.join(rel).with_extension("lbl")
        } else {
            labels.to_path_buf()
        };
        let label_img = read_label_image(&lbl_path)?;
        let points = post.assign(&img.range_grid(), &label_img, &map)?;
        write_labels(&points, &remap, out_file(out, &prediction_rel(rel), "label")?)?;
    }
    println!("assigned labels for {} frames with {}", files.len(), post.name());
    Ok(())
}

pub fn run(o: &GlobalOpts) -> Result<()> {
    let input = require(&o.input, "input", "run")?;
    let out = require(&o.output, "output", "run")?;
    let cfg = load_config(o)?;
    let remap = load_remap(&cfg)?;
    let pipeline = load_pipeline(cfg)?;
    let files = inputs(input, "bin")?;
    for (file, rel) in &files {
        let scan = read_point_cloud(file)?;
        let labels = pipeline.process(&scan)?;
        write_labels(&labels, &remap, out_file(out, &prediction_rel(rel), "label")?)?;
    }
    println!("labelled {} scans", files.len());
    Ok(())
}

/// Ground truth for a prediction, trying the `labels/` sibling layout too.
fn gt_for(gt_root: &Path, rel: &Path) -> PathBuf {
    let direct = gt_root.join(rel);
    if direct.exists() {
        return direct;
    }
    let swapped: PathBuf = rel
        .components()
        .map(|c| match c {
            Component::Normal(s) if s == "predictions" => Component::Normal("labels".as_ref()),
            other => other,
        })
        .collect();
    gt_root.join(swapped)
}

pub fn eval(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let input = require(&o.input, "input", "eval")?;
    let gt_root = require(&o.gt, "gt", "eval")?;
    let remap = load_remap(&cfg)?;
    let preds = inputs(input, "label")?;
    if preds.is_empty() {
        return Err(rangeseg::Error::Input(format!("no .label files under {}", input.display())).into());
    }
    let mut cm = ConfusionMatrix::new();
    for (file, rel) in &preds {
        let gt_path = if gt_root.is_dir() { gt_for(gt_root, rel) } else { gt_root.to_path_buf() };
        let pred = read_labels(file, &remap)?;
        let gt = read_labels(&gt_path, &remap)?;
        cm.accumulate(&pred.semantic, &gt.semantic)
            .with_context(|| format!("scoring {}", file.display()))?;
    }
    let report = EvalReport::new(&cm, &remap, preds.len());
    print!("{}", report.to_table());
    if let Some(out) = &o.output {
        fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn benchmark(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let scans = scans_or_synthetic(o, &cfg)?;
    let pipeline = if cfg.paths.weights.is_some() {
        Pipeline::from_config(cfg)?
    } else {
        eprintln!("no weights given; timing randomly initialised weights (seed {})", o.seed);
        Pipeline::with_seeded_weights(cfg, o.seed)?
    };
    let report = run_benchmark(&pipeline, &scans)?;
    print!("{}", report.to_text());
    if let Some(out) = &o.output {
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn count_ops(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let net = match &cfg.paths.weights {
        Some(w) => Manifest::read(w)?.network,
        None => cfg.network_or_default(),
    };
    let model = Model::build(&net, Init::Zeros)?;
    let p = &cfg.projection;
    let ops = model.count_macs(p.height, p.width)?;
    let rf = ReceptiveField::of_network(&net);
    println!("input             {}x{}", p.height, p.width);
    println!("parameters        {}", model.count_parameters());
    println!("MACs              {}", ops.macs);
    println!("GOPs              {:.3}", ops.gops);
    println!("receptive field   {} x {}", rf.vertical, rf.horizontal);
    println!("split halo        {}", split_halo(&net));
    Ok(())
}

pub fn quantize(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let weights = cfg
        .paths
        .weights
        .clone()
        .ok_or_else(|| usage("`quantize` needs --weights"))?;
    let (model, _) = load_weights(&weights)?;
    let scans = scans_or_synthetic(o, &cfg)?;
    let inputs = scans
        .iter()
        .map(|s| {
            let (img, _) = spherical_project(s, &cfg.projection)?;
            Ok(compute_normals(&img).to_tensor())
        })
        .collect::<rangeseg::Result<Vec<_>>>()?;
    let params = calibrate(&model, &inputs)?;
    store_quant_params(&weights, &params)?;
    println!(
        "stored {} weight and {} activation exponents from {} frames in {}",
        params.weights.len(),
        params.activations.len(),
        inputs.len(),
        weights.display()
    );
    Ok(())
}

pub fn init_weights(o: &GlobalOpts) -> Result<()> {
    let cfg = load_config(o)?;
    let out = require(&o.output, "output", "init-weights")?;
    let model = Model::build(&cfg.network_or_default(), Init::Seeded(o.seed))?;
    save_weights(&model, out, None)?;
    println!("wrote {} parameters to {}", model.count_parameters(), out.display());
    Ok(())
}
