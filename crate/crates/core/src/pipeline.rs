//! Frame-level orchestration: project, estimate normals, segment the range
//! image, and carry labels back to points.
//!
//! The forward pass can also be run as two width halves, emulating a
//! deployment that spreads one sweep over two accelerator cores. Each half
//! is widened by a halo of neighbouring columns at least as wide as the
//! network's receptive field, so the stitched logits are bit-identical to
//! an unsplit pass.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelImage;
use crate::kitti_io::PointCloudScan;
use crate::network::{argmax_labels, Init, Model, NetworkConfig};
use crate::normals::compute_normals;
use crate::postprocess::{self, PatchConfig, PostProcessor};
use crate::projection::{spherical_project, PointPixelMap, ProjectionConfig, RangeImage};
use crate::quantization::{fake_quantized_forward, QuantParams};
use crate::receptive_field::ReceptiveField;
use crate::registry::Registry;
use crate::tensor::Tensor;
use crate::weights::load_weights;

pub const STAGE_PROJECT: &str = "project";
pub const STAGE_NORMALS: &str = "normals";
pub const STAGE_FORWARD: &str = "forward";
pub const STAGE_NLA: &str = "nla";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset_root: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Class remap JSON; SemanticKITTI's when absent.
    pub remap: Option<PathBuf>,
}

/// The single config document; every section has defaults.
///
/// ```json
/// {
///   "projection": { "height": 64, "width": 2048, "fov_up": 3.0, "fov_down": -25.0 },
///   "network": { ... },
///   "patch": { "method": "nla", "k": 5 },
///   "quantized": false,
///   "paths": { "weights": "model.json" },
///   "split_cores": 1,
///   "power_watts": 16.8
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub projection: ProjectionConfig,
    /// Must match the weight manifest when both are given.
    pub network: Option<NetworkConfig>,
    pub patch: PatchConfig,
    /// Run the int8 fake-quantized backend.
    pub quantized: bool,
    pub paths: PathsConfig,
    pub split_cores: usize,
    pub power_watts: Option<f64>,
    /// Overrides the computed split halo; for studying seam error only.
    pub halo: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            projection: ProjectionConfig::default(),
            network: None,
            patch: PatchConfig::default(),
            quantized: false,
            paths: PathsConfig::default(),
            split_cores: 1,
            power_watts: None,
            halo: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.patch.validate()?;
        if let Some(n) = &self.network {
            n.validate()?;
        }
        if !matches!(self.split_cores, 1 | 2) {
            return Err(Error::Config(format!("split_cores must be 1 or 2, got {}", self.split_cores)));
        }
        if let Some(p) = self.power_watts {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Config(format!("power_watts must be positive, got {p}")));
            }
        }
        Ok(())
    }

    pub fn network_or_default(&self) -> NetworkConfig {
        self.network.clone().unwrap_or_default()
    }
}

/// One way of turning the network input into logits.
pub trait InferenceBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
}

/// What a backend factory gets to work with.
pub struct BackendContext {
    pub model: Arc<Model>,
    pub quant: Option<QuantParams>,
}

pub struct FloatBackend {
    model: Arc<Model>,
}

impl InferenceBackend for FloatBackend {
    fn name(&self) -> &'static str {
        "float"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.model.forward(input)
    }
}

pub struct Int8Backend {
    model: Arc<Model>,
    params: QuantParams,
}

impl InferenceBackend for Int8Backend {
    fn name(&self) -> &'static str {
        "int8"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        fake_quantized_forward(&self.model, &self.params, input)
    }
}

pub fn backend_registry() -> Registry<BackendContext, dyn InferenceBackend> {
    let mut r: Registry<BackendContext, dyn InferenceBackend> = Registry::new("inference backend");
    r.register("float", |ctx| Ok(Box::new(FloatBackend { model: ctx.model.clone() })))
        .register("int8", |ctx| {
            let params = ctx.quant.clone().ok_or_else(|| {
                Error::Config("int8 inference needs calibrated exponents; run `quantize` first".into())
            })?;
            params.check_covers(&ctx.model)?;
            Ok(Box::new(Int8Backend { model: ctx.model.clone(), params }))
        });
    r
}

/// Halo for a split pass: the horizontal receptive-field radius rounded up
/// to the network's total stride, so both crops stay on the stride grid.
pub fn split_halo(net: &NetworkConfig) -> usize {
    let rf = ReceptiveField::of_network(net).horizontal;
    rf.div_ceil(net.total_stride()) * net.total_stride()
}

/// Runs `forward` on `[0, seam + halo)` and `[seam − halo, W)` and stitches
/// the outputs back together at `seam`. Both halves run concurrently.
///
/// `align` is the stride grid the crop origins must sit on.
pub fn split_forward_at<F>(input: &Tensor, seam: usize, halo: usize, align: usize, forward: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let w = input.width();
    if seam == 0 || seam >= w {
        return Err(Error::Input(format!("seam {seam} must fall inside width {w}")));
    }
    if align == 0 || !seam.is_multiple_of(align) || !halo.is_multiple_of(align) || !w.is_multiple_of(align) {
        return Err(Error::Config(format!(
            "seam {seam}, halo {halo} and width {w} must be multiples of {align}"
        )));
    }
    let left_end = (seam + halo).min(w);
    let right_start = seam.saturating_sub(halo);
    let left_in = input.crop_cols(0, left_end);
    let right_in = input.crop_cols(right_start, w);
    let (left, right) = rayon::join(|| forward(&left_in), || forward(&right_in));
    let (left, right) = (left?, right?);
    Tensor::concat_cols(&[
        left.crop_cols(0, seam),
        right.crop_cols(seam - right_start, w - right_start),
    ])
}

/// Two-way split at the middle column.
pub fn split_forward<F>(input: &Tensor, halo: usize, align: usize, forward: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if !input.width().is_multiple_of(2) {
        return Err(Error::Config(format!("cannot halve odd width {}", input.width())));
    }
    split_forward_at(input, input.width() / 2, halo, align, forward)
}

/// Wall time spent in each stage of one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub project: Duration,
    pub normals: Duration,
    pub forward: Duration,
    pub nla: Duration,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    model: Arc<Model>,
    backend: Box<dyn InferenceBackend>,
    post: Box<dyn PostProcessor>,
    halo: usize,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, model: Model, quant: Option<QuantParams>) -> Result<Pipeline> {
        cfg.validate()?;
        if let Some(n) = &cfg.network {
            if *n != model.config {
                return Err(Error::Config(
                    "config network section disagrees with the loaded weights".into(),
                ));
            }
        }
        let model = Arc::new(model);
        let backend_name = if cfg.quantized { "int8" } else { "float" };
        let backend = backend_registry().create(backend_name, &BackendContext { model: model.clone(), quant })?;
        let post = postprocess::from_config(&cfg.patch)?;
        let halo = cfg.halo.unwrap_or_else(|| split_halo(&model.config));
        Ok(Pipeline { cfg, model, backend, post, halo })
    }

    /// Loads weights from `cfg.paths.weights`.
    pub fn from_config(cfg: PipelineConfig) -> Result<Pipeline> {
        let path = cfg
            .paths
            .weights
            .clone()
            .ok_or_else(|| Error::Config("no weights file given".into()))?;
        let (model, quant) = load_weights(&path)?;
        Pipeline::new(cfg, model, quant)
    }

    /// Random weights; for benchmarking and tests.
    pub fn with_seeded_weights(cfg: PipelineConfig, seed: u64) -> Result<Pipeline> {
        let model = Model::build(&cfg.network_or_default(), Init::Seeded(seed))?;
        Pipeline::new(cfg, model, None)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    pub fn halo(&self) -> usize {
        self.halo
    }

    pub fn project(&self, scan: &PointCloudScan) -> Result<(RangeImage, PointPixelMap)> {
        spherical_project(scan, &self.cfg.projection).map_err(|e| e.in_stage(STAGE_PROJECT))
    }

    pub fn normals(&self, img: &RangeImage) -> RangeImage {
        compute_normals(img)
    }

    pub fn logits(&self, img: &RangeImage) -> Result<Tensor> {
        self.backend.forward(&img.to_tensor()).map_err(|e| e.in_stage(STAGE_FORWARD))
    }

    pub fn logits_split(&self, img: &RangeImage) -> Result<Tensor> {
        let align = self.model.config.total_stride();
        split_forward(&img.to_tensor(), self.halo, align, |x| self.backend.forward(x))
            .map_err(|e| e.in_stage(STAGE_FORWARD))
    }

    /// Label image from the configured number of cores.
    pub fn infer(&self, img: &RangeImage) -> Result<LabelImage> {
        let logits = if self.cfg.split_cores == 2 {
            self.logits_split(img)?
        } else {
            self.logits(img)?
        };
        Ok(argmax_labels(&logits))
    }

    pub fn postprocess(&self, img: &RangeImage, labels: &LabelImage, map: &PointPixelMap) -> Result<Vec<u8>> {
        self.post
            .assign(&img.range_grid(), labels, map)
            .map_err(|e| e.in_stage(STAGE_NLA))
    }

    fn run(&self, scan: &PointCloudScan, split: bool, times: &mut StageTimes) -> Result<Vec<u8>> {
        if scan.is_empty() {
            return Ok(Vec::new());
        }
        let t = Instant::now();
        let (img, map) = self.project(scan)?;
        times.project = t.elapsed();

        let t = Instant::now();
        let img = self.normals(&img);
        times.normals = t.elapsed();

        let t = Instant::now();
        let logits = if split { self.logits_split(&img)? } else { self.logits(&img)? };
        let labels = argmax_labels(&logits);
        times.forward = t.elapsed();

        let t = Instant::now();
        let out = self.postprocess(&img, &labels, &map)?;
        times.nla = t.elapsed();
        Ok(out)
    }

    /// Per-point labels on a single core.
    pub fn run_frame(&self, scan: &PointCloudScan) -> Result<Vec<u8>> {
        self.run(scan, false, &mut StageTimes::default())
    }

    /// Per-point labels with the forward pass split over two halves.
    pub fn run_frame_split(&self, scan: &PointCloudScan) -> Result<Vec<u8>> {
        self.run(scan, true, &mut StageTimes::default())
    }

    /// Per-point labels using `split_cores` from the config.
    pub fn process(&self, scan: &PointCloudScan) -> Result<Vec<u8>> {
        self.run(scan, self.cfg.split_cores == 2, &mut StageTimes::default())
    }

    pub fn process_timed(&self, scan: &PointCloudScan) -> Result<(Vec<u8>, StageTimes)> {
        let mut times = StageTimes::default();
        let out = self.run(scan, self.cfg.split_cores == 2, &mut times)?;
        Ok((out, times))
    }
}

/// Median latency of each stage, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub project_ms: f64,
    pub normals_ms: f64,
    pub forward_ms: f64,
    pub nla_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub frames: usize,
    pub seconds: f64,
    pub fps: f64,
    pub gops_per_frame: f64,
    pub gops_per_second: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_watts: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gops_per_watt: Option<f64>,
    pub split_cores: usize,
    pub backend: String,
    pub median_latency: StageLatency,
}

pub fn gops_per_second(gops_per_frame: f64, fps: f64) -> f64 {
    gops_per_frame * fps
}

pub fn gops_per_watt(gops_per_second: f64, watts: f64) -> f64 {
    gops_per_second / watts
}

impl BenchmarkReport {
    /// Derives the throughput figures from raw measurements.
    pub fn from_measurements(frames: usize, seconds: f64, gops_per_frame: f64, power_watts: Option<f64>) -> Self {
        let fps = frames as f64 / seconds;
        let gops = gops_per_second(gops_per_frame, fps);
        BenchmarkReport {
            frames,
            seconds,
            fps,
            gops_per_frame,
            gops_per_second: gops,
            power_watts,
            gops_per_watt: power_watts.map(|w| gops_per_watt(gops, w)),
            split_cores: 1,
            backend: String::new(),
            median_latency: StageLatency::default(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "frames            {}\nseconds           {:.3}\nfps               {:.3}\nGOPs/frame        {:.3}\nGOP/s             {:.3}\n",
            self.frames, self.seconds, self.fps, self.gops_per_frame, self.gops_per_second
        );
        if let (Some(w), Some(e)) = (self.power_watts, self.gops_per_watt) {
            s += &format!("power (W)         {w:.2}\nGOP/W             {e:.3}\n");
        }
        let l = &self.median_latency;
        s += &format!(
            "median ms         project {:.2}  normals {:.2}  forward {:.2}  nla {:.2}\n",
            l.project_ms, l.normals_ms, l.forward_ms, l.nla_ms
        );
        s
    }
}

fn median_ms(mut v: Vec<Duration>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort();
    let n = v.len();
    let mid = if n % 2 == 1 {
        v[n / 2].as_secs_f64()
    } else {
        (v[n / 2 - 1].as_secs_f64() + v[n / 2].as_secs_f64()) / 2.0
    };
    mid * 1e3
}

/// Times every frame after one untimed warm-up pass over the first.
pub fn benchmark(pipeline: &Pipeline, scans: &[PointCloudScan]) -> Result<BenchmarkReport> {
    let first = scans
        .first()
        .ok_or_else(|| Error::Input("benchmark needs at least one frame".into()))?;
    pipeline.process(first)?;

    let mut per_frame = Vec::with_capacity(scans.len());
    let start = Instant::now();
    for scan in scans {
        per_frame.push(pipeline.process_timed(scan)?.1);
    }
    let seconds = start.elapsed().as_secs_f64();

    let p = &pipeline.config().projection;
    let gops = pipeline.model().count_macs(p.height, p.width)?.gops;
    let mut report = BenchmarkReport::from_measurements(scans.len(), seconds, gops, pipeline.config().power_watts);
    report.split_cores = pipeline.config().split_cores;
    report.backend = pipeline.backend_name().to_string();
    report.median_latency = StageLatency {
        project_ms: median_ms(per_frame.iter().map(|t| t.project).collect()),
        normals_ms: median_ms(per_frame.iter().map(|t| t.normals).collect()),
        forward_ms: median_ms(per_frame.iter().map(|t| t.forward).collect()),
        nla_ms: median_ms(per_frame.iter().map(|t| t.nla).collect()),
    };
    Ok(report)
}
