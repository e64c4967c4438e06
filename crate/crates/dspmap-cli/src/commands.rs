//! Implementations of the CLI subcommands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dspmap::eval::{self, PrCurve, TruthGrid, VelocityEstimate, VelocityTruth};
use dspmap::io::{
    read_ground_truth, write_grid, write_ground_truth, DatasetReader, DatasetWriter,
    GroundTruthFile,
};
use dspmap::occupancy::{self, OccupancyGrid};
use dspmap::sim::{ground_truth_step, ObservedLattice, WorldSpec};
use dspmap::{FrameReport, MapMode, Pipeline, RunConfig};
use dspmap::nalgebra::Vector3;

use crate::manifest::RunManifest;
use crate::{CliError, CliResult};

fn data_err<T>(e: impl Into<anyhow::Error>) -> Result<T, CliError> {
    Err(CliError::Data(e.into()))
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn res_tag(res: f64) -> String {
    format!("{res:.3}")
}

fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

fn load_profile(profile: Option<&str>) -> Result<RunConfig, CliError> {
    match profile {
        None | Some("paper") => Ok(RunConfig::default()),
        Some("desk") => Ok(RunConfig::desk_profile()),
        Some(other) => usage(format!("unknown profile `{other}` (expected desk or paper)")),
    }
}

fn load_config(profile: Option<&str>, path: &Path) -> Result<RunConfig, CliError> {
    let mut cfg = load_profile(profile)?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    cfg.apply_text(&text)
        .with_context(|| format!("in config file {}", path.display()))?;
    Ok(cfg.normalize().context("invalid configuration")?)
}

fn threads_from(threads: Option<usize>) -> usize {
    threads
        .or_else(|| std::env::var("DSPMAP_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

pub fn simulate(
    world_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    stride: u32,
    resolutions: Option<Vec<f64>>,
    mask_density: u32,
    map_size: &[f64],
) -> CliResult {
    if map_size.len() != 3 || map_size.iter().any(|s| *s <= 0.0) {
        return usage("--map-size wants three positive numbers x,y,z");
    }
    let map_size = [map_size[0], map_size[1], map_size[2]];
    let text = fs::read_to_string(world_path)
        .with_context(|| format!("cannot read world file {}", world_path.display()))?;
    let mut world = WorldSpec::parse(&text)
        .map_err(|e| anyhow!("{}: {e}", world_path.display()))?;
    if let Some(s) = seed {
        world.seed = s;
    }
    let resolutions = resolutions.unwrap_or_else(|| vec![0.1, 0.2, 0.3]);
    fs::create_dir_all(out_dir)?;

    let data_path = out_dir.join("data.dspd");
    let mut writer = DatasetWriter::new(BufWriter::new(File::create(&data_path)?))?;
    let n_frames = world.n_frames();
    let stride = stride.max(1) as usize;

    let mut lattices: Vec<ObservedLattice> =
        resolutions.iter().map(|&r| ObservedLattice::new(&world, r)).collect();
    let mut truths: Vec<GroundTruthFile> = resolutions
        .iter()
        .map(|&r| GroundTruthFile {
            map_size,
            edge: r,
            dims: [0, 0, 0],
            stride: stride as u32,
            steps: Vec::new(),
        })
        .collect();

    for frame_idx in 0..n_frames {
        let frame = world.raycast_frame(frame_idx);
        writer.write_frame(&frame)?;
        // ordinal cadence, matching `map --snapshot-every`
        if (frame_idx + 1) % stride == 0 {
            for (i, &res) in resolutions.iter().enumerate() {
                lattices[i].observe(&world, frame_idx, mask_density);
                let step = ground_truth_step(&world, &lattices[i], frame_idx, map_size, res);
                truths[i].dims = step.dims;
                truths[i].steps.push(step);
            }
        }
    }
    writer.into_inner().flush()?;

    let mut outputs = vec!["data.dspd".to_string()];
    for (i, &res) in resolutions.iter().enumerate() {
        let name = format!("truth_{}.dspt", res_tag(res));
        write_ground_truth(BufWriter::new(File::create(out_dir.join(&name))?), &truths[i])?;
        outputs.push(name);
    }

    let mut manifest = RunManifest::new("simulate", world.seed);
    manifest.inputs.push(world_path.to_path_buf());
    manifest.config.insert("world".into(), world.name.clone());
    manifest.config.insert("frames".into(), n_frames.to_string());
    manifest.config.insert("stride".into(), stride.to_string());
    manifest.config.insert(
        "resolutions".into(),
        resolutions.iter().map(|r| res_tag(*r)).collect::<Vec<_>>().join(","),
    );
    manifest.config.insert(
        "map_size".into(),
        format!("{},{},{}", map_size[0], map_size[1], map_size[2]),
    );
    manifest.outputs = outputs;
    manifest.write(out_dir)?;
    println!(
        "simulated {} frames of `{}` into {}",
        n_frames,
        world.name,
        out_dir.display()
    );
    Ok(())
}

pub struct MapArgs {
    pub dataset: PathBuf,
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub snapshot_every: u32,
    pub mode: Option<String>,
    pub profile: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub slice_z: Option<f64>,
    pub dump_particles: bool,
    pub dump_clusters: bool,
    pub truth: Option<PathBuf>,
    pub resolutions: Option<Vec<f64>>,
}

pub fn map(args: MapArgs) -> CliResult {
    let mut cfg = load_config(args.profile.as_deref(), &args.config)?;
    if let Some(mode) = &args.mode {
        cfg.filter.mode = match MapMode::parse(mode) {
            Some(m) => m,
            None => return usage(format!("unknown mode `{mode}`")),
        };
    }
    let resolutions = args.resolutions.unwrap_or_else(|| cfg.resolutions.clone());
    let truth = match &args.truth {
        Some(path) => Some(
            read_ground_truth(BufReader::new(File::open(path).with_context(|| {
                format!("cannot open truth file {}", path.display())
            })?))
            .context("reading ground truth")?,
        ),
        None => None,
    };

    fs::create_dir_all(&args.out_dir)?;
    let mut pipeline = Pipeline::new(cfg.clone(), args.seed, threads_from(args.threads))
        .context("building pipeline")?;
    let reader = DatasetReader::new(BufReader::new(
        File::open(&args.dataset)
            .with_context(|| format!("cannot open dataset {}", args.dataset.display()))?,
    ))?;

    let mut timing = BufWriter::new(File::create(args.out_dir.join("timing.tsv"))?);
    writeln!(timing, "{}", FrameReport::TABLE_HEADER)?;
    let mut clusters_out = if args.dump_clusters {
        let mut w = BufWriter::new(File::create(args.out_dir.join("clusters.tsv"))?);
        writeln!(w, "frame\tcluster\tcx\tcy\tcz\tcount\tmatched_prev\tvx\tvy\tvz")?;
        Some(w)
    } else {
        None
    };
    let mut velocity_rows: Vec<String> = Vec::new();
    let mut outputs = vec!["timing.tsv".to_string()];
    let snapshot_every = args.snapshot_every.max(1) as u64;

    let mut frame_idx: u64 = 0;
    let mut reports: Vec<FrameReport> = Vec::new();
    for frame in reader.frames() {
        let frame = frame?;
        let report = pipeline.step(&frame).context("pipeline step")?;
        writeln!(timing, "{}", report.table_row())?;
        if let Some(w) = &mut clusters_out {
            pipeline.dump_clusters(w)?;
        }
        let is_snapshot = (frame_idx + 1) % snapshot_every == 0;
        if is_snapshot {
            for &res in &resolutions {
                let grid = occupancy::occupancy_grid(pipeline.state(), res);
                let name = format!("grid_{}_{:05}.dspg", res_tag(res), frame_idx);
                write_grid(BufWriter::new(File::create(args.out_dir.join(&name))?), &grid)?;
                outputs.push(name);
                if let Some(z) = args.slice_z {
                    if let Some(img) = occupancy::slice_image(&grid, z) {
                        let name = format!("slice_{}_{:05}.png", res_tag(res), frame_idx);
                        img.save(args.out_dir.join(&name)).context("writing slice image")?;
                        outputs.push(name);
                    }
                }
            }
            if args.dump_particles {
                let name = format!("particles_{frame_idx:05}.tsv");
                let mut w = BufWriter::new(File::create(args.out_dir.join(&name))?);
                pipeline.state().dump_particles(&mut w)?;
                outputs.push(name);
            }
        }
        if let Some(gt) = &truth {
            if let Some(step) = gt.steps.iter().find(|s| s.frame == frame_idx) {
                for agent in &step.agents {
                    match eval::map_velocity_estimate(
                        pipeline.state(),
                        agent.position,
                        cfg.ball_radius,
                    ) {
                        Ok((mean, var)) => velocity_rows.push(format!(
                            "{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                            frame.timestamp, agent.id, mean.x, mean.y, mean.z, var.x, var.y, var.z
                        )),
                        Err(_) => velocity_rows.push(format!(
                            "{:.6}\t{}\t-\t-\t-\t-\t-\t-",
                            frame.timestamp, agent.id
                        )),
                    }
                }
            }
        }
        reports.push(report);
        frame_idx += 1;
    }
    timing.flush()?;
    if let Some(mut w) = clusters_out {
        w.flush()?;
        outputs.push("clusters.tsv".to_string());
    }

    if args.truth.is_some() {
        let mut w = BufWriter::new(File::create(args.out_dir.join("velocity_estimates.tsv"))?);
        writeln!(w, "timestamp\tagent\tvx\tvy\tvz\tvar_x\tvar_y\tvar_z")?;
        for row in &velocity_rows {
            writeln!(w, "{row}")?;
        }
        w.flush()?;
        outputs.push("velocity_estimates.tsv".to_string());
    }

    let mut manifest = RunManifest::new("map", args.seed);
    manifest.inputs.push(args.dataset.clone());
    manifest.inputs.push(args.config.clone());
    manifest.config = cfg.snapshot();
    manifest
        .config
        .insert("snapshot_every".into(), snapshot_every.to_string());
    if let Some(p) = &args.profile {
        manifest.config.insert("profile".into(), p.clone());
    }
    manifest.outputs = outputs;
    manifest.write(&args.out_dir)?;

    let mean = |f: fn(&FrameReport) -> f64| -> f64 {
        if reports.is_empty() {
            0.0
        } else {
            reports.iter().map(f).sum::<f64>() / reports.len() as f64
        }
    };
    println!(
        "mapped {} frames (mode {}) | live {} | mean ms: preprocess {:.2} velocity {:.2} predict {:.2} update {:.2} fused {:.2} birth {:.2} total {:.2}",
        frame_idx,
        cfg.filter.mode.name(),
        reports.last().map_or(0, |r| r.live),
        mean(|r| r.t_preprocess.as_secs_f64() * 1e3),
        mean(|r| r.t_velocity.as_secs_f64() * 1e3),
        mean(|r| r.t_predict.as_secs_f64() * 1e3),
        mean(|r| r.t_update.as_secs_f64() * 1e3),
        mean(|r| r.t_fused.as_secs_f64() * 1e3),
        mean(|r| r.t_birth.as_secs_f64() * 1e3),
        mean(|r| r.t_total.as_secs_f64() * 1e3),
    );
    Ok(())
}

fn read_grids(run_dir: &Path, tag: &str) -> Result<Vec<OccupancyGrid>, CliError> {
    let mut named: Vec<(String, PathBuf)> = fs::read_dir(run_dir)
        .with_context(|| format!("cannot read run dir {}", run_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| (e.file_name().to_string_lossy().to_string(), e.path()))
        .filter(|(name, _)| name.starts_with(&format!("grid_{tag}_")) && name.ends_with(".dspg"))
        .collect();
    named.sort();
    let mut grids = Vec::with_capacity(named.len());
    for (_, path) in named {
        grids.push(dspmap::io::read_grid(BufReader::new(File::open(&path)?))?);
    }
    Ok(grids)
}

pub fn evaluate(run_dir: &Path, truth_dir: &Path, resolutions: Option<Vec<f64>>) -> CliResult {
    let resolutions = resolutions.unwrap_or_else(|| {
        RunManifest::read(run_dir)
            .ok()
            .and_then(|m| m.config.get("resolutions").cloned())
            .map(|v| v.split(',').filter_map(|r| r.trim().parse().ok()).collect())
            .unwrap_or_else(|| vec![0.1, 0.2, 0.3])
    });
    let mut summary = String::new();
    summary.push_str("resolution\tauc\tbest_f1\tpairs\n");
    for &res in &resolutions {
        let tag = res_tag(res);
        let truth_path = truth_dir.join(format!("truth_{tag}.dspt"));
        let gt = read_ground_truth(BufReader::new(File::open(&truth_path).with_context(
            || format!("missing truth file {}", truth_path.display()),
        )?))?;
        let grids = read_grids(run_dir, &tag)?;
        if grids.is_empty() {
            return data_err(anyhow!("no grid_{tag}_*.dspg snapshots in {}", run_dir.display()));
        }
        let truth_grids: Vec<(f64, TruthGrid)> = gt
            .steps
            .iter()
            .map(|s| (s.timestamp, TruthGrid::from(s)))
            .collect();
        let mut pairs: Vec<(&OccupancyGrid, &TruthGrid)> = Vec::new();
        for grid in &grids {
            let Some((_, tg)) = truth_grids
                .iter()
                .find(|(t, _)| (t - grid.timestamp).abs() < 1e-6)
            else {
                continue;
            };
            if (grid.center - tg.center).norm() > 1e-3 {
                return data_err(anyhow!(
                    "mismatched map centers at t={}: grid {:?} vs truth {:?}",
                    grid.timestamp,
                    grid.center,
                    tg.center
                ));
            }
            pairs.push((grid, tg));
        }
        if pairs.is_empty() {
            return data_err(anyhow!(
                "no snapshot/truth timestamp overlap at resolution {tag}; \
                 align --snapshot-every with the simulate stride"
            ));
        }
        let curve = pr_curve_checked(&pairs)?;
        let table_name = format!("eval_{tag}.tsv");
        let mut w = BufWriter::new(File::create(run_dir.join(&table_name))?);
        writeln!(w, "threshold\tprecision\trecall\tf1")?;
        for p in &curve.points {
            writeln!(w, "{:.2}\t{:.6}\t{:.6}\t{:.6}", p.threshold, p.precision, p.recall, p.f1)?;
        }
        writeln!(w, "# auc={:.6} best_f1={:.6} pairs={}", curve.auc, curve.best_f1, pairs.len())?;
        w.flush()?;
        summary.push_str(&format!(
            "{tag}\t{:.4}\t{:.4}\t{}\n",
            curve.auc,
            curve.best_f1,
            pairs.len()
        ));
    }

    // velocity metrics when the run recorded estimates and truth has agents
    let est_path = run_dir.join("velocity_estimates.tsv");
    let first_truth = truth_dir.join(format!("truth_{}.dspt", res_tag(resolutions[0])));
    if est_path.exists() {
        let gt = read_ground_truth(BufReader::new(File::open(&first_truth)?))?;
        let reports = velocity_reports_from_files(&est_path, &gt)?;
        if !reports.is_empty() {
            summary.push_str("agent\trmse\tvar\tmbd\tpairs\n");
            for (agent, report) in reports {
                summary.push_str(&report.summary_row(&format!("{agent}")));
                summary.push('\n');
            }
        }
    }

    // mean per-phase timing from the run, when present
    if let Ok(text) = fs::read_to_string(run_dir.join("timing.tsv")) {
        if let Some(row) = mean_timing_row(&text) {
            summary.push_str("phase_means_ms\t");
            summary.push_str(&row);
            summary.push('\n');
        }
    }

    fs::write(run_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn pr_curve_checked(pairs: &[(&OccupancyGrid, &TruthGrid)]) -> Result<PrCurve, CliError> {
    match eval::pr_curve(pairs, &default_thresholds()) {
        Ok(c) => Ok(c),
        Err(e) => data_err(e),
    }
}

fn velocity_reports_from_files(
    est_path: &Path,
    gt: &GroundTruthFile,
) -> Result<Vec<(u32, eval::VelocityReport)>, CliError> {
    let text = fs::read_to_string(est_path)?;
    let mut per_agent: BTreeMap<u32, Vec<VelocityEstimate>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 || cols[2] == "-" {
            continue;
        }
        let agent: u32 = cols[1].parse().map_err(|_| anyhow!("bad agent id in {line}"))?;
        let num = |i: usize| -> Result<f64, anyhow::Error> {
            cols[i].parse().map_err(|_| anyhow!("bad number in {line}"))
        };
        per_agent.entry(agent).or_default().push(VelocityEstimate {
            t: num(0)?,
            mean: Vector3::new(num(2)?, num(3)?, num(4)?),
            var: Some(Vector3::new(num(5)?, num(6)?, num(7)?)),
        });
    }
    let mut out = Vec::new();
    for (agent, estimates) in per_agent {
        let truth: Vec<VelocityTruth> = gt
            .steps
            .iter()
            .filter_map(|s| {
                s.agents.iter().find(|a| a.id == agent).map(|a| VelocityTruth {
                    t: s.timestamp,
                    velocity: a.velocity,
                })
            })
            .collect();
        if truth.is_empty() {
            continue;
        }
        match eval::velocity_report(&estimates, &truth, 0.1, 0.5) {
            Ok(report) => out.push((agent, report)),
            Err(_) => continue,
        }
    }
    Ok(out)
}

fn mean_timing_row(text: &str) -> Option<String> {
    let mut sums = vec![0.0f64; 7];
    let mut n = 0usize;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 14 {
            continue;
        }
        for (i, c) in cols[7..14].iter().enumerate() {
            sums[i] += c.parse::<f64>().ok()?;
        }
        n += 1;
    }
    (n > 0).then(|| {
        sums.iter()
            .map(|s| format!("{:.3}", s / n as f64))
            .collect::<Vec<_>>()
            .join("\t")
    })
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    dataset: &Path,
    config: &Path,
    sweeps: &[String],
    frames: Option<usize>,
    profile: Option<String>,
    seed: u64,
    threads: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult {
    let base = load_config(profile.as_deref(), config)?;
    let mut keys: Vec<String> = Vec::new();
    let mut values: Vec<Vec<String>> = Vec::new();
    for sweep in sweeps {
        let Some((key, vals)) = sweep.split_once('=') else {
            return usage(format!("--sweep wants key=v1,v2,..., got `{sweep}`"));
        };
        // reject unknown keys before running anything
        if base.clone().set(key, vals.split(',').next().unwrap_or("")).is_err() {
            return usage(format!("unknown sweep key `{key}`"));
        }
        keys.push(key.to_string());
        values.push(vals.split(',').map(|v| v.trim().to_string()).collect());
    }

    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for vals in &values {
        combos = combos
            .iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }

    let mut table = String::new();
    let header: Vec<String> = keys
        .iter()
        .cloned()
        .chain(
            ["frames", "points_mean", "live_last", "t_predict_ms", "t_update_ms", "t_fused_ms", "t_birth_ms", "t_total_ms"]
                .iter()
                .map(|s| s.to_string()),
        )
        .collect();
    table.push_str(&header.join("\t"));
    table.push('\n');

    for combo in combos {
        let mut cfg = base.clone();
        for (key, value) in keys.iter().zip(&combo) {
            cfg.set(key, value).context("applying sweep value")?;
        }
        let cfg = cfg.normalize().context("invalid swept configuration")?;
        let mut pipeline =
            Pipeline::new(cfg, seed, threads_from(threads)).context("building pipeline")?;
        let reader = DatasetReader::new(BufReader::new(File::open(dataset)?))?;
        let mut reports = Vec::new();
        for frame in reader.frames() {
            let frame = frame?;
            reports.push(pipeline.step(&frame).context("pipeline step")?);
            if frames.is_some_and(|cap| reports.len() >= cap) {
                break;
            }
        }
        let n = reports.len().max(1) as f64;
        let mean_ms = |f: fn(&FrameReport) -> std::time::Duration| {
            reports.iter().map(|r| f(r).as_secs_f64() * 1e3).sum::<f64>() / n
        };
        let mut row = combo.clone();
        row.push(reports.len().to_string());
        row.push(format!(
            "{:.0}",
            reports.iter().map(|r| r.points_used as f64).sum::<f64>() / n
        ));
        row.push(reports.last().map_or(0, |r| r.live).to_string());
        row.push(format!("{:.3}", mean_ms(|r| r.t_predict)));
        row.push(format!("{:.3}", mean_ms(|r| r.t_update)));
        row.push(format!("{:.3}", mean_ms(|r| r.t_fused)));
        row.push(format!("{:.3}", mean_ms(|r| r.t_birth)));
        row.push(format!("{:.3}", mean_ms(|r| r.t_total)));
        table.push_str(&row.join("\t"));
        table.push('\n');
    }

    print!("{table}");
    if let Some(path) = out {
        fs::write(&path, &table)?;
    }
    Ok(())
}

pub fn dump_config(profile: Option<String>) -> CliResult {
    let cfg = load_profile(profile.as_deref())?;
    print!("{}", cfg.normalize().context("invalid profile")?.dump());
    Ok(())
}
