use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use ohgc_core::graph::{build_graph, PoseGraph, TopologyKind};
use ohgc_core::greedy::greedy_decode;
use ohgc_core::neural::{load_checkpoint, save_checkpoint, DiscriminatorBundle, Trainer};
use ohgc_core::ohgc::{group_with, LearnedScorer, OracleScorer, TraceRecord};
use ohgc_core::scene::{
    load_coco, load_results, save_coco_gt, save_results, SceneDataset, SceneGenerator,
};
use ohgc_core::{evaluate, evaluate_records, EvalReport, GroupingResult, Scene};

use crate::config::RunConfig;
use crate::error::{usage, write_file, CliError, CliResult};
use crate::{Command, GlobalArgs, Grouper, TopologyArg};

/// Loads the configuration file (or defaults) and applies global flags.
pub fn resolve_config(global: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    if let Some(t) = global.topology {
        cfg.topology.kind = match t {
            TopologyArg::Tree => TopologyKind::Tree,
            TopologyArg::Bypass => TopologyKind::Bypass,
            TopologyArg::Extended => TopologyKind::Extended,
            TopologyArg::Full => TopologyKind::Full,
        };
    }
    if global.threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(cfg: &RunConfig, command: Command) -> CliResult<()> {
    match command {
        Command::Synth { out, count, gt_out } => {
            let gt_out = gt_out.unwrap_or_else(|| with_suffix(&out, ".gt.json"));
            synth(cfg, &out, count, &gt_out)
        }
        Command::Train {
            data,
            checkpoint_out,
            metrics_out,
            steps,
        } => {
            let metrics_out =
                metrics_out.unwrap_or_else(|| with_suffix(&checkpoint_out, ".metrics.jsonl"));
            let mut cfg = cfg.clone();
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            train(&cfg, &data, &checkpoint_out, &metrics_out)
        }
        Command::Group {
            data,
            out,
            grouper,
            checkpoint,
            trace_out,
        } => group(cfg, &data, &out, grouper, checkpoint.as_deref(), trace_out.as_deref()),
        Command::Eval { results, gt, out } => {
            let out = out.unwrap_or_else(|| with_suffix(&results, ".eval.json"));
            let report = eval(cfg, &results, &gt, &out)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Bench {
            data,
            checkpoint,
            scaling,
            out,
        } => {
            let report = bench(cfg, &data, checkpoint.as_deref(), scaling)?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_file(&out, &serde_json::to_string_pretty(&report).expect("serializes"))?;
            }
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `count` synthetic scenes plus their COCO ground truth.
pub fn synth(cfg: &RunConfig, out: &Path, count: usize, gt_out: &Path) -> CliResult<()> {
    let gen = SceneGenerator::new(cfg.synth.clone())?;
    let scenes: Vec<Scene> = (0..count as u64)
        .into_par_iter()
        .map(|i| gen.scene(i))
        .collect();
    save_coco_gt(&scenes, &cfg.skeleton(), gt_out)?;
    SceneDataset::new(scenes).save(out)?;
    Ok(())
}

fn load_scenes(cfg: &RunConfig, path: &Path) -> CliResult<Vec<Scene>> {
    let data = SceneDataset::load(path)?;
    for s in &data.scenes {
        s.validate(cfg.num_types())
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if s.embedding_dim != cfg.skeleton.embedding_dim {
            return Err(usage(format!(
                "{}: scene {} has {}-D embeddings, the config expects {}",
                path.display(),
                s.image_id,
                s.embedding_dim,
                cfg.skeleton.embedding_dim
            )));
        }
    }
    Ok(data.scenes)
}

#[derive(Serialize)]
struct MetricsLine {
    step: usize,
    edge_bce: f64,
    macro_final_bce: f64,
    macro_intermediate_bce: f64,
    total: f64,
    edge_accuracy: f64,
}

/// Trains from scratch, cycling through the scenes in file order.
pub fn train(cfg: &RunConfig, data: &Path, checkpoint_out: &Path, metrics_out: &Path) -> CliResult<()> {
    let scenes = load_scenes(cfg, data)?;
    if scenes.is_empty() {
        return Err(usage(format!("{}: no scenes to train on", data.display())));
    }
    for s in &scenes {
        if s.embeddings_missing {
            return Err(usage(format!(
                "{}: scene {} has no embeddings",
                data.display(),
                s.image_id
            )));
        }
        if !s.has_ground_truth() {
            return Err(usage(format!(
                "{}: scene {} has no ground truth",
                data.display(),
                s.image_id
            )));
        }
    }
    let bundle = DiscriminatorBundle::<f64>::new(cfg.shape(), cfg.network.init_seed)?;
    let mut trainer = Trainer::new(
        bundle,
        cfg.train.trainer(),
        cfg.ohgc(),
        cfg.topology(),
        cfg.num_types(),
    )?;
    let mut log = std::fs::File::create(metrics_out).map_err(|e| ohgc_core::Error::Io {
        path: metrics_out.to_path_buf(),
        source: e,
    })?;
    let b = cfg.train.batch_size;
    for step in 0..cfg.train.steps {
        let batch: Vec<Scene> = (0..b)
            .map(|i| scenes[(step * b + i) % scenes.len()].clone())
            .collect();
        let r = trainer.train_step(&batch)?;
        let line = MetricsLine {
            step: step + 1,
            edge_bce: r.edge_bce,
            macro_final_bce: r.macro_final_bce,
            macro_intermediate_bce: r.macro_intermediate_bce,
            total: r.total,
            edge_accuracy: r.edge_accuracy,
        };
        writeln!(log, "{}", serde_json::to_string(&line).expect("serializes"))
            .map_err(|e| CliError::Internal(e.to_string()))?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 {
            save_checkpoint(&trainer.bundle, checkpoint_out)?;
        }
    }
    save_checkpoint(&trainer.bundle, checkpoint_out)?;
    Ok(())
}

fn load_bundle(cfg: &RunConfig, path: &Path) -> CliResult<DiscriminatorBundle<f64>> {
    let bundle: DiscriminatorBundle<f64> = load_checkpoint(path)?;
    let want = cfg.shape();
    if bundle.shape.input_dim != want.input_dim {
        return Err(CliError::Core(ohgc_core::Error::Shape {
            name: "input".into(),
            expected: vec![want.input_dim],
            found: vec![bundle.shape.input_dim],
        }));
    }
    Ok(bundle)
}

/// Groups one scene with the selected method.
pub fn group_scene(
    cfg: &RunConfig,
    scene: &Scene,
    grouper: Grouper,
    bundle: Option<&DiscriminatorBundle<f64>>,
    trace: Option<&mut Vec<TraceRecord>>,
) -> CliResult<GroupingResult> {
    let topology = cfg.topology();
    let ohgc = cfg.ohgc();
    match grouper {
        Grouper::Greedy => Ok(greedy_decode(scene, &cfg.skeleton(), cfg.greedy.tag_threshold)),
        Grouper::Oracle => {
            let graph: PoseGraph<f64> = build_graph(scene, cfg.num_types(), &topology);
            let scorer = OracleScorer::new(scene, &graph);
            Ok(group_with(scene, &graph, &scorer, &ohgc, trace)?)
        }
        Grouper::Ohgc => {
            let bundle = bundle.ok_or_else(|| usage("--grouper ohgc needs --checkpoint"))?;
            let graph: PoseGraph<f64> = build_graph(scene, cfg.num_types(), &topology);
            let node_features = bundle.interaction_gnn(&graph, None)?;
            let scorer = LearnedScorer {
                bundle,
                node_features,
            };
            Ok(group_with(scene, &graph, &scorer, &ohgc, trace)?)
        }
    }
}

pub fn group(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    grouper: Grouper,
    checkpoint: Option<&Path>,
    trace_out: Option<&Path>,
) -> CliResult<()> {
    let scenes = load_scenes(cfg, data)?;
    let bundle = match (grouper, checkpoint) {
        (Grouper::Ohgc, Some(p)) => Some(load_bundle(cfg, p)?),
        (Grouper::Ohgc, None) => return Err(usage("--grouper ohgc needs --checkpoint")),
        _ => None,
    };
    if grouper == Grouper::Oracle {
        if let Some(s) = scenes.iter().find(|s| !s.has_ground_truth()) {
            return Err(usage(format!(
                "--grouper oracle needs ground truth; scene {} has none",
                s.image_id
            )));
        }
    }
    let tracing = trace_out.is_some();
    let outputs: Vec<CliResult<(GroupingResult, Vec<TraceRecord>)>> = scenes
        .par_iter()
        .map(|s| {
            let mut trace = Vec::new();
            let r = group_scene(cfg, s, grouper, bundle.as_ref(), tracing.then_some(&mut trace))?;
            Ok((r, trace))
        })
        .collect();
    let mut results = Vec::with_capacity(outputs.len());
    let mut trace_text = String::new();
    for o in outputs {
        let (r, trace) = o?;
        for t in trace {
            let _ = writeln!(trace_text, "{}", serde_json::to_string(&t).expect("serializes"));
        }
        results.push(r);
    }
    save_results(&results, out)?;
    if let Some(path) = trace_out {
        write_file(path, &trace_text)?;
    }
    Ok(())
}

/// Ground truth from a scene dataset or a COCO keypoint file.
fn load_ground_truth(cfg: &RunConfig, path: &Path) -> CliResult<Vec<Scene>> {
    let text = std::fs::read_to_string(path).map_err(|e| ohgc_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let is_coco = serde_json::from_str::<serde_json::Value>(&text)
        .map(|v| v.get("images").is_some())
        .unwrap_or(false);
    if is_coco {
        Ok(load_coco(path, &cfg.skeleton(), cfg.skeleton.embedding_dim)?)
    } else {
        Ok(SceneDataset::load(path)?.scenes)
    }
}

pub fn eval(cfg: &RunConfig, results: &Path, gt: &Path, out: &Path) -> CliResult<EvalReport> {
    let records = load_results(results)?;
    let scenes = load_ground_truth(cfg, gt)?;
    let report = evaluate_records(&records, &scenes, &cfg.skeleton().sigmas())?;
    report.save(out)?;
    Ok(report)
}

/// Mean and median of one pipeline stage, milliseconds per image.
#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingPoint {
    pub candidates: usize,
    pub loop_ms: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BenchReport {
    pub images: usize,
    pub stages: Vec<StageTiming>,
    /// Clustering loop time over the summed stage means.
    pub loop_share: Option<f64>,
    pub scaling: Vec<ScalingPoint>,
    /// Least-squares slope of log time against log candidate count.
    pub scaling_exponent: Option<f64>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>10} {:>10}", "stage", "mean_ms", "median_ms");
        for s in &self.stages {
            let _ = writeln!(out, "{:<16} {:>10.3} {:>10.3}", s.stage, s.mean_ms, s.median_ms);
        }
        if let Some(share) = self.loop_share {
            let _ = writeln!(out, "clustering loop share: {:.1}%", 100.0 * share);
        }
        for p in &self.scaling {
            let _ = writeln!(out, "N={:<5} loop {:>10.3} ms", p.candidates, p.loop_ms);
        }
        if let Some(e) = self.scaling_exponent {
            let _ = writeln!(out, "loop time ~ N^{e:.2}");
        }
        out
    }
}

fn summarize(stage: &str, mut ms: Vec<f64>) -> StageTiming {
    ms.sort_by(f64::total_cmp);
    let n = ms.len();
    let median = if n % 2 == 1 {
        ms[n / 2]
    } else {
        0.5 * (ms[n / 2 - 1] + ms[n / 2])
    };
    StageTiming {
        stage: stage.into(),
        mean_ms: ms.iter().sum::<f64>() / n as f64,
        median_ms: median,
    }
}

struct Timed {
    build: f64,
    gnn: f64,
    cluster: f64,
}

fn time_scene(cfg: &RunConfig, scene: &Scene, bundle: &DiscriminatorBundle<f64>) -> CliResult<(Timed, GroupingResult)> {
    let topology = cfg.topology();
    let t0 = Instant::now();
    let graph: PoseGraph<f64> = build_graph(scene, cfg.num_types(), &topology);
    let t1 = Instant::now();
    let node_features = bundle.interaction_gnn(&graph, None)?;
    let t2 = Instant::now();
    let scorer = LearnedScorer {
        bundle,
        node_features,
    };
    let result = group_with(scene, &graph, &scorer, &cfg.ohgc(), None)?;
    let t3 = Instant::now();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok((
        Timed {
            build: ms(t0, t1),
            gnn: ms(t1, t2),
            cluster: ms(t2, t3),
        },
        result,
    ))
}

/// Times graph construction, the interaction network, the clustering loop
/// and evaluation, one image at a time.
pub fn bench(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, scaling: bool) -> CliResult<BenchReport> {
    let scenes = load_scenes(cfg, data)?;
    let bundle = match checkpoint {
        Some(p) => load_bundle(cfg, p)?,
        None => DiscriminatorBundle::new(cfg.shape(), cfg.network.init_seed)?,
    };
    let sigmas = cfg.skeleton().sigmas();
    let mut report = BenchReport {
        images: scenes.len(),
        ..BenchReport::default()
    };
    if !scenes.is_empty() {
        let (mut build, mut gnn, mut cluster, mut eval) = (vec![], vec![], vec![], vec![]);
        for s in &scenes {
            let (t, result) = time_scene(cfg, s, &bundle)?;
            build.push(t.build);
            gnn.push(t.gnn);
            cluster.push(t.cluster);
            let e0 = Instant::now();
            if s.gt_persons.is_some() {
                evaluate(&[result], std::slice::from_ref(s), &sigmas)?;
            }
            eval.push(e0.elapsed().as_secs_f64() * 1e3);
        }
        report.stages = vec![
            summarize("graph_build", build),
            summarize("gnn_forward", gnn),
            summarize("clustering_loop", cluster),
            summarize("evaluation", eval),
        ];
        let total: f64 = report.stages.iter().map(|s| s.mean_ms).sum();
        if total > 0.0 {
            report.loop_share = Some(report.stages[2].mean_ms / total);
        }
    }
    if scaling {
        report.scaling = scaling_points(cfg, &bundle)?;
        report.scaling_exponent = fit_exponent(&report.scaling);
    }
    Ok(report)
}

/// Clustering-loop time on clean synthetic scenes of 1, 10 and 20 people.
fn scaling_points(cfg: &RunConfig, bundle: &DiscriminatorBundle<f64>) -> CliResult<Vec<ScalingPoint>> {
    let mut points = Vec::new();
    for persons in [1usize, 10, 20] {
        let gen = SceneGenerator::new(ohgc_core::SynthConfig {
            person_count_range: (persons, persons),
            keypoint_drop_prob: 0.0,
            ..cfg.synth.clone()
        })?;
        let mut ms = Vec::new();
        let mut candidates = 0;
        for i in 0..3 {
            let s = gen.scene(i);
            candidates = s.candidates.len();
            let (t, _) = time_scene(cfg, &s, bundle)?;
            ms.push(t.cluster);
        }
        points.push(ScalingPoint {
            candidates,
            loop_ms: summarize("", ms).median_ms,
        });
    }
    Ok(points)
}

fn fit_exponent(points: &[ScalingPoint]) -> Option<f64> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.candidates > 0 && p.loop_ms > 0.0)
        .map(|p| ((p.candidates as f64).ln(), p.loop_ms.ln()))
        .collect();
    if xy.len() < 2 {
        return None;
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
