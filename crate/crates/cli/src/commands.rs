use std::path::{Path, PathBuf};

use mocap::align::{from_local, reference_frames, to_local};
use mocap::augment::{estimate_stats, OcclusionStats};
use mocap::datagen::{corrupt, default_body_spec, default_hand_spec, generate_dataset, CorruptionMask, Manifest};
use mocap::gapfill::{fill_all_gaps, refine, train_refiner, Gap, GapFill, RefinerModel, RefinerSample};
use mocap::locality::{pairwise_distance_stats, select_neighbors, NeighborTable};
use mocap::metrics::{joe_per_frame, jpe_per_frame, ompe_per_frame};
use mocap::outlier::{detect_outliers, repair_outliers, OutlierReport, RepairedFrame};
use mocap::skeleton::{load_motion, save_motion, to_bvh};
use mocap::solver::{build_hetero_graph, prepare_solver_sample, solve_sequence, train_solver, SolverNet};
use mocap::{load_sequence, save_sequence, MarkerMask, MarkerSequence, MocapError, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{PipelineConfig, SynthKind};

/// What a command wrote; printed as JSON on success.
pub type Outputs = Vec<PathBuf>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MocapError + '_ {
    move |source| MocapError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| MocapError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn mismatch(msg: impl Into<String>) -> MocapError {
    MocapError::Shape(msg.into())
}

/// Sequence files named on the command line. A dataset directory contributes
/// its `field` files (`clean` or `corrupted`); any other directory
/// contributes every `*.json` file in name order.
fn sequence_files(inputs: &[PathBuf], field: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            files.push(input.clone());
            continue;
        }
        let manifest = input.join("manifest.json");
        if manifest.is_file() {
            let m = Manifest::load(&manifest)?;
            files.extend(m.sequences.iter().map(|e| input.join(if field == "clean" { &e.clean } else { &e.corrupted })));
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(io_err(input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        files.extend(found);
    }
    if files.is_empty() {
        return Err(mismatch("no input sequences"));
    }
    Ok(files)
}

/// Frames of several sequences with the same markers, back to back.
fn concatenate(seqs: &[MarkerSequence]) -> Result<MarkerSequence> {
    let first = seqs.first().ok_or_else(|| mismatch("no input sequences"))?;
    if seqs.iter().any(|s| s.marker_names != first.marker_names || s.part_labels != first.part_labels) {
        return Err(mismatch("input sequences have different marker sets"));
    }
    let total = seqs.iter().map(MarkerSequence::n_frames).sum();
    let mut out = MarkerSequence::new(first.frame_rate, first.marker_names.clone(), first.part_labels.clone(), total);
    let mut t0 = 0;
    for s in seqs {
        for t in 0..s.n_frames() {
            for k in 0..s.n_markers() {
                out.set_position(t0 + t, k, s.position(t, k));
                out.set_visible(t0 + t, k, s.is_visible(t, k));
            }
        }
        t0 += s.n_frames();
    }
    Ok(out)
}

fn neighbor_table(seq: &MarkerSequence, k: usize) -> Result<NeighborTable> {
    select_neighbors(&pairwise_distance_stats(seq), k, &seq.part_labels)
}

fn load_table(path: &Path) -> Result<NeighborTable> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    NeighborTable::from_json(&text)
}

pub fn generate(config: &PipelineConfig, seed: u64, stats: Option<&Path>, out_dir: &Path) -> Result<Outputs> {
    let s = &config.synth;
    let spec = match s.kind {
        SynthKind::Body => default_body_spec(s.n_frames, seed),
        SynthKind::Hand => default_hand_spec(s.n_frames, seed),
    }
    .with_noise(s.jitter, s.stretch);
    let stats = match stats {
        Some(path) => load_stats(path)?,
        None => OcclusionStats::heavy_tailed(spec.markers.len(), s.max_gap),
    };
    let corruption = mocap::augment::CorruptionConfig { seed, ..config.corruption.clone() };
    let manifest = generate_dataset(&spec, s.n_sequences, &corruption, &stats, out_dir)?;
    let mut outputs = vec![out_dir.join("manifest.json")];
    for e in &manifest.sequences {
        outputs.extend([&e.clean, &e.corrupted, &e.layout, &e.mask, &e.motion].map(|f| out_dir.join(f)));
    }
    Ok(outputs)
}

fn load_stats(path: &Path) -> Result<OcclusionStats> {
    let stats: OcclusionStats = serde_json::from_value(read_json(path)?)?;
    stats.validate()?;
    Ok(stats)
}

/// Occlusion statistics from the occluded inputs and both neighbor tables
/// from the clean ones (the same files outside dataset directories).
pub fn stats(config: &PipelineConfig, inputs: &[PathBuf], out_dir: &Path) -> Result<Outputs> {
    let load_all = |files: Vec<PathBuf>| files.iter().map(|f| load_sequence(f)).collect::<Result<Vec<_>>>();
    let observed = load_all(sequence_files(inputs, "corrupted")?)?;
    let clean = load_all(sequence_files(inputs, "clean")?)?;
    let occlusion = estimate_stats(&observed)?;
    let joined = concatenate(&clean)?;
    let outputs: Outputs = ["occlusion_stats.json", "neighbors_fill.json", "neighbors_solve.json"]
        .iter()
        .map(|f| out_dir.join(f))
        .collect();
    write_json(&outputs[0], &occlusion)?;
    write(&outputs[1], &(neighbor_table(&joined, config.fill_k)?.to_json()? + "\n"))?;
    write(&outputs[2], &(neighbor_table(&joined, config.solve_k)?.to_json()? + "\n"))?;
    Ok(outputs)
}

/// Corrupts every input; input `i` uses seed `seed + 2i`.
pub fn augment(config: &PipelineConfig, seed: u64, inputs: &[PathBuf], stats: &Path, out_dir: &Path) -> Result<Outputs> {
    let stats = load_stats(stats)?;
    let mut outputs = Vec::new();
    for (i, file) in sequence_files(inputs, "clean")?.iter().enumerate() {
        let clean = load_sequence(file)?;
        let (corrupted, mask) = corrupt(&clean, &stats, &config.corruption, seed.wrapping_add(2 * i as u64))?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
        let seq_path = out_dir.join(format!("{stem}.corrupted.json"));
        let mask_path = out_dir.join(format!("{stem}.mask.json"));
        write(&seq_path, &corrupted.to_json()?)?;
        write(&mask_path, &serde_json::to_string(&mask)?)?;
        outputs.extend([seq_path, mask_path]);
    }
    Ok(outputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    All,
    Fill,
    Outliers,
}

#[derive(Debug, Serialize)]
pub struct FillReport {
    pub fallback_frames: usize,
    pub fills: Vec<GapFill>,
    pub unfilled: Vec<Gap>,
}

#[derive(Debug, Serialize)]
pub struct CleanReport {
    pub fill: Option<FillReport>,
    pub outliers: Option<OutlierReport>,
    pub refined_entries: usize,
    pub repaired: Vec<RepairedFrame>,
}

pub struct Cleaned {
    pub report: CleanReport,
    pub sequence: MarkerSequence,
}

/// Gap filling, then outlier repair, then optional refinement of the filled
/// entries in the reference-marker frame.
pub fn clean_sequence(
    config: &PipelineConfig,
    seq: &MarkerSequence,
    table: Option<&NeighborTable>,
    model: Option<&RefinerModel>,
    stage: Stage,
) -> Result<Cleaned> {
    let mut out = seq.clone();
    let mut report = CleanReport {
        fill: None,
        outliers: None,
        refined_entries: 0,
        repaired: Vec::new(),
    };
    if stage != Stage::Outliers {
        let computed;
        let table = match table {
            Some(t) => t,
            None => {
                computed = neighbor_table(seq, config.fill_k)?;
                &computed
            }
        };
        let outcome = fill_all_gaps(&out, table)?;
        report.fill = Some(FillReport {
            fallback_frames: outcome.fallback_frames(),
            fills: outcome.fills,
            unfilled: outcome.unfilled,
        });
        out = outcome.sequence;
    }
    if stage != Stage::Fill {
        let detected = detect_outliers(&out, config.outlier.policy, config.outlier.half_window);
        let (repaired, frames) = repair_outliers(&out, &detected)?;
        out = repaired;
        report.repaired = frames;
        report.outliers = Some(detected);
    }
    let mut filled = MarkerMask::new(seq.n_frames(), seq.n_markers());
    for t in 0..seq.n_frames() {
        for k in 0..seq.n_markers() {
            filled.set(t, k, !seq.is_visible(t, k) && out.is_visible(t, k));
        }
    }
    if let Some(model) = model.filter(|_| stage != Stage::Outliers && !filled.is_empty()) {
        if model.n_markers() != out.n_markers() {
            return Err(mismatch(format!(
                "refiner expects {} markers, sequence has {}",
                model.n_markers(),
                out.n_markers()
            )));
        }
        let frames = reference_frames(&out, &config.references.resolve(&out)?)?;
        let local = to_local(&out, &frames, None)?;
        let world = from_local(&refine(&local, &filled, model)?, &frames, None)?;
        for t in 0..out.n_frames() {
            for k in 0..out.n_markers() {
                if filled.get(t, k) {
                    out.set_position(t, k, world.position(t, k));
                }
            }
        }
        report.refined_entries = filled.count();
    }
    Ok(Cleaned { report, sequence: out })
}

pub struct CleanArgs<'a> {
    pub input: &'a Path,
    pub model: Option<&'a Path>,
    pub neighbors: Option<&'a Path>,
    pub out: &'a Path,
    pub report: Option<&'a Path>,
    pub stage: Stage,
}

pub fn clean(config: &PipelineConfig, args: &CleanArgs<'_>) -> Result<Outputs> {
    let seq = load_sequence(args.input)?;
    let table = args.neighbors.map(load_table).transpose()?;
    let model = args.model.map(RefinerModel::load).transpose()?;
    let cleaned = clean_sequence(config, &seq, table.as_ref(), model.as_ref(), args.stage)?;
    save_sequence(&cleaned.sequence, args.out)?;
    let mut outputs = vec![args.out.to_path_buf()];
    if let Some(path) = args.report {
        write_json(path, &cleaned.report)?;
        outputs.push(path.to_path_buf());
    }
    Ok(outputs)
}

pub fn solve(config: &PipelineConfig, input: &Path, model: &Path, out: &Path, bvh: Option<&Path>) -> Result<Outputs> {
    let seq = load_sequence(input)?;
    let net = SolverNet::load(model)?;
    if net.graph().n_markers != seq.n_markers() {
        return Err(mismatch(format!(
            "solver expects {} markers, sequence has {}",
            net.graph().n_markers,
            seq.n_markers()
        )));
    }
    let frames = reference_frames(&seq, &config.references.resolve(&seq)?)?;
    let solved = solve_sequence(&net, &to_local(&seq, &frames, None)?, &frames)?;
    save_motion(out, &solved.skeleton, &solved.motion, seq.frame_rate)?;
    let mut outputs = vec![out.to_path_buf()];
    if let Some(path) = bvh {
        write(path, &to_bvh(&solved.skeleton, &solved.motion, seq.frame_rate))?;
        outputs.push(path.to_path_buf());
    }
    if solved.degenerate_rotations > 0 {
        eprintln!("{} degenerate rotations replaced by the identity", solved.degenerate_rotations);
    }
    Ok(outputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Refiner,
    Solver,
}

struct DatasetItem {
    clean: MarkerSequence,
    filled: MarkerSequence,
    mask: MarkerMask,
    motion_file: PathBuf,
    layout_file: PathBuf,
}

/// Every corrupted sequence of a dataset, gap-filled with a fill table
/// computed from the clean sequences.
fn load_dataset(config: &PipelineConfig, dir: &Path) -> Result<Vec<DatasetItem>> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    if manifest.sequences.is_empty() {
        return Err(mismatch("dataset has no sequences"));
    }
    let clean: Vec<MarkerSequence> = manifest
        .sequences
        .iter()
        .map(|e| load_sequence(&dir.join(&e.clean)))
        .collect::<Result<_>>()?;
    let table = neighbor_table(&concatenate(&clean)?, config.fill_k)?;
    let mut items = Vec::with_capacity(clean.len());
    for (e, clean) in manifest.sequences.iter().zip(clean) {
        let corrupted = load_sequence(&dir.join(&e.corrupted))?;
        let mask = CorruptionMask::load(&dir.join(&e.mask))?.occluded()?;
        let filled = fill_all_gaps(&corrupted, &table)?.sequence;
        items.push(DatasetItem {
            clean,
            filled,
            mask,
            motion_file: dir.join(&e.motion),
            layout_file: dir.join(&e.layout),
        });
    }
    Ok(items)
}

pub fn train(config: &PipelineConfig, seed: u64, which: Which, dataset: &Path, out: &Path, log: &Path) -> Result<Outputs> {
    let items = load_dataset(config, dataset)?;
    let history = match which {
        Which::Refiner => {
            let table = neighbor_table(&concatenate(&items.iter().map(|i| i.clean.clone()).collect::<Vec<_>>())?, config.fill_k)?;
            let mut samples = Vec::with_capacity(items.len());
            for item in &items {
                let frames = reference_frames(&item.filled, &config.references.resolve(&item.filled)?)?;
                samples.push(RefinerSample {
                    input: to_local(&item.filled, &frames, None)?,
                    truth: to_local(&item.clean, &frames, None)?,
                    mask: item.mask.clone(),
                });
            }
            let train = mocap::gapfill::TrainConfig { seed, ..config.refiner_train.clone() };
            let (model, history) = train_refiner(&samples, &table.symmetric_edges(), config.refiner.clone(), &train)?;
            model.save(out)?;
            history
        }
        Which::Solver => {
            let first = &items[0];
            let (skeleton, _, _) = load_motion(&first.motion_file)?;
            let layout = mocap::MarkerLayout::load(&first.layout_file)?;
            let table = neighbor_table(&concatenate(&items.iter().map(|i| i.clean.clone()).collect::<Vec<_>>())?, config.solve_k)?;
            let threshold = config.graph_threshold.unwrap_or(1.5 * skeleton.mean_bone_length());
            let graph = build_hetero_graph(&layout, &skeleton, &table, threshold)?;
            let mut samples = Vec::with_capacity(items.len());
            for item in &items {
                let (skeleton, motion, _) = load_motion(&item.motion_file)?;
                let refs = config.references.resolve(&item.filled)?;
                samples.push(prepare_solver_sample(&item.filled, &motion, &skeleton, &refs)?.0);
            }
            let train = mocap::solver::SolverTrainConfig { seed, ..config.solver_train.clone() };
            let (net, history) = train_solver(&samples, &graph, config.solver.clone(), &train)?;
            net.save(out)?;
            history
        }
    };
    let mut csv = String::from("step,loss\n");
    for (step, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    write(log, &csv)?;
    Ok(vec![out.to_path_buf(), log.to_path_buf()])
}

enum Loaded {
    Motion(mocap::Skeleton, mocap::Motion),
    Sequence(MarkerSequence),
}

fn load_any(path: &Path) -> Result<Loaded> {
    let value = read_json(path)?;
    if value.get("marker_names").is_some() {
        Ok(Loaded::Sequence(load_sequence(path)?))
    } else if value.get("joints").is_some() {
        let (skeleton, motion, _) = load_motion(path)?;
        Ok(Loaded::Motion(skeleton, motion))
    } else {
        Err(mismatch(format!("{} is neither a marker sequence nor a motion", path.display())))
    }
}

pub struct EvalArgs<'a> {
    pub mask: Option<&'a Path>,
    pub out: &'a Path,
    pub per_frame: Option<&'a Path>,
    pub pred: &'a Path,
    pub table: Option<&'a Path>,
    pub truth: &'a Path,
}

/// OMPE for sequences (over the mask file's occluded entries, or every
/// entry visible in the truth), JOE and JPE for motions.
pub fn eval(args: &EvalArgs<'_>) -> Result<Outputs> {
    let (metrics, per_frame): (Vec<(&str, f64)>, String) = match (load_any(args.pred)?, load_any(args.truth)?) {
        (Loaded::Sequence(est), Loaded::Sequence(truth)) => {
            let mask = match args.mask {
                Some(path) => CorruptionMask::load(path)?.occluded()?,
                None => {
                    let mut mask = MarkerMask::new(truth.n_frames(), truth.n_markers());
                    for t in 0..truth.n_frames() {
                        for k in 0..truth.n_markers() {
                            mask.set(t, k, truth.is_visible(t, k));
                        }
                    }
                    mask
                }
            };
            let rows = ompe_per_frame(&est, &truth, &mask)?;
            let (sum, count) = rows.iter().fold((0.0, 0), |(s, c), &(fs, fc)| (s + fs, c + fc));
            let mut csv = String::from("frame,ompe,entries\n");
            for (t, &(s, c)) in rows.iter().enumerate() {
                let mean = if c == 0 { 0.0 } else { s / c as f64 };
                csv.push_str(&format!("{t},{mean},{c}\n"));
            }
            (vec![("ompe", if count == 0 { 0.0 } else { sum / count as f64 })], csv)
        }
        (Loaded::Motion(s1, m1), Loaded::Motion(s2, m2)) => {
            let joe = joe_per_frame(&m1, &m2)?;
            let jpe = jpe_per_frame(&m1, &s1, &m2, &s2)?;
            let mut csv = String::from("frame,joe,jpe\n");
            for (t, (a, b)) in joe.iter().zip(&jpe).enumerate() {
                csv.push_str(&format!("{t},{a},{b}\n"));
            }
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            (vec![("joe", mean(&joe)), ("jpe", mean(&jpe))], csv)
        }
        _ => return Err(mismatch("prediction and truth must both be sequences or both motions")),
    };
    let object: serde_json::Map<String, Value> = metrics.iter().map(|&(k, v)| (k.to_string(), json!(v))).collect();
    write_json(args.out, &object)?;
    let mut outputs = vec![args.out.to_path_buf()];
    if let Some(path) = args.table {
        let mut csv = String::from("metric,value\n");
        for (k, v) in &metrics {
            csv.push_str(&format!("{k},{v}\n"));
        }
        write(path, &csv)?;
        outputs.push(path.to_path_buf());
    }
    if let Some(path) = args.per_frame {
        write(path, &per_frame)?;
        outputs.push(path.to_path_buf());
    }
    Ok(outputs)
}
