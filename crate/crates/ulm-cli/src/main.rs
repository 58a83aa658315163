//! Command-line front end for the super-resolution ultrasound pipeline.
//!
//! Subcommands mirror the pipeline stages: `simulate` produces synthetic
//! frame stacks with ground truth, `localize` / `track` / `render` run
//! increasing prefixes of the processing chain, `run` executes everything and
//! writes a manifest with digests of all inputs and outputs, and `evaluate`
//! scores pipeline output against a ground-truth track file.
//!
//! All outputs are deterministic for a given input, configuration, and seed,
//! independent of `--threads`.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;
use ulm_core::{
    evaluate, link, localize::read_bubbles_csv, localize::write_bubbles_csv, localize_stack,
    maps::write_map_pgm16, maps::write_map_ulmm, maps::write_speed_csv, read_stack,
    register::write_pairings_csv, register_pairs, resolve_psf, run_pipeline, simulate,
    tracks::read_tracks_csv, tracks::write_tracks_csv, write_stack, Bubble, BubbleSet, FrameStack,
    Metrics, Pairing, PipelineConfig, PipelineOutput, PsfSource, Scenario, StageTimings, Track,
};

#[derive(Parser)]
#[command(
    name = "ulm",
    version,
    about = "Microbubble localization, tracking, and super-resolution mapping",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic frame stack and its ground truth.
    Simulate {
        /// Scenario description file.
        scenario: PathBuf,
        /// Seed for the scenario's random number generator.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives stack.ulmf and truth.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Localize bubbles on every frame of a stack.
    Localize {
        /// Input frame stack (ULMF).
        stack: PathBuf,
        /// Configuration file; defaults apply for missing keys.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[command(flatten)]
        psf: PsfOpts,
        /// Output directory; receives bubbles.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Localize, then pair bubbles across frames and link tracks.
    Track {
        /// Input frame stack (ULMF).
        stack: PathBuf,
        /// Configuration file; defaults apply for missing keys.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[command(flatten)]
        psf: PsfOpts,
        /// Also write the per-frame pairings as pairings.csv.
        #[arg(long)]
        dump_pairings: bool,
        /// Output directory; receives tracks.csv (and pairings.csv).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full pipeline and write the density and speed maps.
    Render {
        /// Input frame stack (ULMF).
        stack: PathBuf,
        /// Configuration file; defaults apply for missing keys.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[command(flatten)]
        psf: PsfOpts,
        /// Output directory; receives the map files.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full pipeline, write every output, and record a manifest.
    Run {
        /// Input frame stack (ULMF).
        stack: PathBuf,
        /// Configuration file; defaults apply for missing keys.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[command(flatten)]
        psf: PsfOpts,
        /// Also write the per-frame pairings as pairings.csv.
        #[arg(long)]
        dump_pairings: bool,
        /// Output directory; receives CSVs, maps, and manifest.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score pipeline outputs against a ground-truth track file.
    Evaluate {
        /// Directory holding bubbles.csv and tracks.csv from a previous run.
        pred: PathBuf,
        /// Ground-truth track CSV (as written by simulate).
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Match tolerance between a detection and a truth bubble, in pixels.
        #[arg(long, default_value_t = 0.5, value_name = "PX")]
        tol: f64,
    },
}

/// Matched-filter source: either cut from the data or synthesized.
#[derive(Args)]
struct PsfOpts {
    /// Sigma of a synthetic Gaussian matched filter, in pixels.
    #[arg(
        long,
        value_name = "SIGMA",
        conflicts_with_all = ["psf_frame", "psf_row", "psf_col"]
    )]
    psf_sigma: Option<f64>,
    /// Frame index to cut the matched filter from.
    #[arg(long, value_name = "F", requires = "psf_row", requires = "psf_col")]
    psf_frame: Option<usize>,
    /// Row of the matched-filter center in that frame.
    #[arg(long, value_name = "R", requires = "psf_frame")]
    psf_row: Option<usize>,
    /// Column of the matched-filter center in that frame.
    #[arg(long, value_name = "C", requires = "psf_frame")]
    psf_col: Option<usize>,
}

/// Sigma used when no matched-filter flag is given.
const DEFAULT_PSF_SIGMA: f64 = 1.5;

impl PsfOpts {
    fn resolve(&self) -> PsfSource {
        match (self.psf_frame, self.psf_row, self.psf_col) {
            (Some(frame), Some(row), Some(col)) => PsfSource::Extracted { frame, row, col },
            _ => PsfSource::Gaussian {
                sigma: self.psf_sigma.unwrap_or(DEFAULT_PSF_SIGMA),
            },
        }
    }

    /// Key/value form for the manifest config echo.
    fn describe(&self) -> Vec<(String, String)> {
        match self.resolve() {
            PsfSource::Gaussian { sigma } => {
                vec![("psf_source".into(), format!("gaussian {sigma}"))]
            }
            PsfSource::Extracted { frame, row, col } => vec![(
                "psf_source".into(),
                format!("extracted {frame} {row} {col}"),
            )],
        }
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
        } => cmd_simulate(&scenario, seed, &out),
        Command::Localize {
            stack,
            config,
            psf,
            out,
        } => cmd_localize(&stack, config.as_deref(), &psf, &out),
        Command::Track {
            stack,
            config,
            psf,
            dump_pairings,
            out,
        } => cmd_track(&stack, config.as_deref(), &psf, dump_pairings, &out),
        Command::Render {
            stack,
            config,
            psf,
            out,
        } => cmd_render(&stack, config.as_deref(), &psf, &out),
        Command::Run {
            stack,
            config,
            psf,
            dump_pairings,
            out,
        } => cmd_run(&stack, config.as_deref(), &psf, dump_pairings, &out),
        Command::Evaluate { pred, truth, tol } => cmd_evaluate(&pred, &truth, tol),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::from_file(p).context("loading config")?,
        None => PipelineConfig::default(),
    };
    cfg.validate().context("validating configuration")?;
    Ok(cfg)
}

fn load_stack(path: &Path) -> Result<FrameStack> {
    let stack = read_stack(path).with_context(|| format!("reading stack {}", path.display()))?;
    if stack.n_frames == 0 {
        bail!("stack {} has no frames to process", path.display());
    }
    Ok(stack)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn cmd_simulate(scenario_path: &Path, seed: u64, out_dir: &Path) -> Result<()> {
    let scenario = Scenario::from_file(scenario_path).context("loading scenario")?;
    let sim = simulate(&scenario, seed).context("simulate stage")?;
    ensure_out_dir(out_dir)?;

    let stack_path = out_dir.join("stack.ulmf");
    write_stack(&sim.stack, &stack_path).context("writing stack.ulmf")?;

    // The truth file lists every bubble observation, including bubbles seen
    // on a single frame, so detection scoring over the CSV is exact.
    let mut by_id: BTreeMap<usize, Track> = sim.tracks.iter().map(|t| (t.id, t.clone())).collect();
    for (frame, bubbles) in sim.truth_frames.iter().enumerate() {
        for &(id, position) in bubbles {
            let track = by_id.entry(id).or_insert_with(|| Track {
                id,
                points: Vec::new(),
                velocities: Vec::new(),
            });
            if !track.points.iter().any(|&(f, _)| f == frame) {
                track.points.push((frame, position));
            }
        }
    }
    let truth: Vec<Track> = by_id.into_values().collect();
    let truth_path = out_dir.join("truth.csv");
    write_tracks_csv(&truth, &truth_path).context("writing truth.csv")?;

    let n_observations: usize = sim.truth_frames.iter().map(|f| f.len()).sum();
    println!(
        "simulated {} frames of {}x{} ({} bubble observations, {} truth segments)",
        sim.stack.n_frames,
        sim.stack.height,
        sim.stack.width,
        n_observations,
        truth.len()
    );
    println!("wrote {}", stack_path.display());
    println!("wrote {}", truth_path.display());
    Ok(())
}

fn cmd_localize(
    stack_path: &Path,
    config: Option<&Path>,
    psf: &PsfOpts,
    out_dir: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let stack = load_stack(stack_path)?;
    let filter = resolve_psf(&stack, psf.resolve(), cfg.psf_patch_size)
        .context("resolving the matched filter")?;
    let sets = localize_stack(&stack, &filter, &cfg).context("localize stage")?;
    ensure_out_dir(out_dir)?;

    let bubbles_path = out_dir.join("bubbles.csv");
    write_bubbles_csv(&sets, &bubbles_path).context("writing bubbles.csv")?;

    let n: usize = sets.iter().map(|s| s.bubbles.len()).sum();
    println!("localized {} bubbles over {} frames", n, sets.len());
    println!("wrote {}", bubbles_path.display());
    Ok(())
}

fn cmd_track(
    stack_path: &Path,
    config: Option<&Path>,
    psf: &PsfOpts,
    dump_pairings: bool,
    out_dir: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let stack = load_stack(stack_path)?;
    let filter = resolve_psf(&stack, psf.resolve(), cfg.psf_patch_size)
        .context("resolving the matched filter")?;
    let sets = localize_stack(&stack, &filter, &cfg).context("localize stage")?;
    let registered = register_pairs(&sets, &cfg).context("register stage")?;
    let pairings: Vec<Pairing> = registered.into_iter().map(|(_, p)| p).collect();
    let tracks = link(
        &sets,
        &pairings,
        stack.pixel_size_mm as f64,
        stack.frame_rate_hz as f64,
        cfg.min_track_length,
    )
    .context("link stage")?;
    ensure_out_dir(out_dir)?;

    let tracks_path = out_dir.join("tracks.csv");
    write_tracks_csv(&tracks, &tracks_path).context("writing tracks.csv")?;
    println!("linked {} tracks from {} frames", tracks.len(), sets.len());
    println!("wrote {}", tracks_path.display());

    if dump_pairings {
        let tagged: Vec<(usize, &Pairing)> = pairings.iter().enumerate().collect();
        let pairings_path = out_dir.join("pairings.csv");
        write_pairings_csv(&tagged, &pairings_path).context("writing pairings.csv")?;
        println!("wrote {}", pairings_path.display());
    }
    Ok(())
}

/// Writes the five map files shared by `render` and `run`, returning the
/// paths written.
fn write_maps(output: &PipelineOutput, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let density = &output.density;
    let speed = output.velocity.speed_grid();
    let (vh, vw) = (output.velocity.height, output.velocity.width);
    let mut written = Vec::new();

    let path = out_dir.join("density.ulmm");
    write_map_ulmm(density.values(), density.height, density.width, &path)
        .context("writing density.ulmm")?;
    written.push(path);

    let path = out_dir.join("density.pgm");
    write_map_pgm16(density.values(), density.height, density.width, &path)
        .context("writing density.pgm")?;
    written.push(path);

    let path = out_dir.join("speed.ulmm");
    write_map_ulmm(&speed, vh, vw, &path).context("writing speed.ulmm")?;
    written.push(path);

    let path = out_dir.join("speed.pgm");
    write_map_pgm16(&speed, vh, vw, &path).context("writing speed.pgm")?;
    written.push(path);

    let path = out_dir.join("speed.csv");
    write_speed_csv(&output.velocity, &path).context("writing speed.csv")?;
    written.push(path);

    Ok(written)
}

fn print_pipeline_summary(output: &PipelineOutput, timings: &StageTimings) {
    let n_bubbles: usize = output.sets.iter().map(|s| s.bubbles.len()).sum();
    println!(
        "pipeline: {} bubbles, {} tracks, {}x{} super-resolved grid",
        n_bubbles,
        output.tracks.len(),
        output.density.height,
        output.density.width
    );
    println!(
        "timings: localize {:.1} ms, register {:.1} ms, link {:.1} ms, render {:.1} ms",
        timings.localize_ms, timings.register_ms, timings.link_ms, timings.render_ms
    );
}

fn cmd_render(
    stack_path: &Path,
    config: Option<&Path>,
    psf: &PsfOpts,
    out_dir: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let stack = load_stack(stack_path)?;
    let (output, timings) = run_pipeline(&stack, psf.resolve(), &cfg).context("pipeline")?;
    ensure_out_dir(out_dir)?;
    let written = write_maps(&output, out_dir)?;
    print_pipeline_summary(&output, &timings);
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_run(
    stack_path: &Path,
    config: Option<&Path>,
    psf: &PsfOpts,
    dump_pairings: bool,
    out_dir: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let stack = load_stack(stack_path)?;
    let (output, timings) = run_pipeline(&stack, psf.resolve(), &cfg).context("pipeline")?;
    ensure_out_dir(out_dir)?;

    let mut written = Vec::new();

    let path = out_dir.join("bubbles.csv");
    write_bubbles_csv(&output.sets, &path).context("writing bubbles.csv")?;
    written.push(path);

    let path = out_dir.join("tracks.csv");
    write_tracks_csv(&output.tracks, &path).context("writing tracks.csv")?;
    written.push(path);

    if dump_pairings {
        let tagged: Vec<(usize, &Pairing)> = output.pairings.iter().enumerate().collect();
        let path = out_dir.join("pairings.csv");
        write_pairings_csv(&tagged, &path).context("writing pairings.csv")?;
        written.push(path);
    }

    written.extend(write_maps(&output, out_dir)?);

    let mut manifest = RunManifest::new("run");
    for (key, value) in cfg.to_key_values() {
        manifest.config.insert(key, value);
    }
    for (key, value) in psf.describe() {
        manifest.config.insert(key, value);
    }
    manifest.add_input("stack", stack_path)?;
    if let Some(cfg_path) = config {
        manifest.add_input("config", cfg_path)?;
    }
    for path in &written {
        manifest.add_output(path)?;
    }
    manifest
        .timings_ms
        .insert("localize".into(), timings.localize_ms);
    manifest
        .timings_ms
        .insert("register".into(), timings.register_ms);
    manifest.timings_ms.insert("link".into(), timings.link_ms);
    manifest
        .timings_ms
        .insert("render".into(), timings.render_ms);

    let manifest_path = out_dir.join("manifest.json");
    manifest
        .write(&manifest_path)
        .context("writing manifest.json")?;
    written.push(manifest_path);

    print_pipeline_summary(&output, &timings);
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(pred_dir: &Path, truth_path: &Path, tol: f64) -> Result<()> {
    if !pred_dir.is_dir() {
        anyhow::bail!(
            "{} is not a directory; pass the output directory of a previous run \
             (the one holding bubbles.csv and tracks.csv)",
            pred_dir.display()
        );
    }
    let truth_tracks = read_tracks_csv(truth_path)
        .with_context(|| format!("reading truth {}", truth_path.display()))?;
    let bubbles_path = pred_dir.join("bubbles.csv");
    let pred_rows = read_bubbles_csv(&bubbles_path)
        .with_context(|| format!("reading {}", bubbles_path.display()))?;
    let tracks_path = pred_dir.join("tracks.csv");
    let pred_tracks = read_tracks_csv(&tracks_path)
        .with_context(|| format!("reading {}", tracks_path.display()))?;

    let max_frame = truth_tracks
        .iter()
        .chain(pred_tracks.iter())
        .flat_map(|t| t.points.iter().map(|&(f, _)| f))
        .chain(pred_rows.iter().map(|r| r.frame))
        .max();
    let n_frames = max_frame.map_or(0, |f| f + 1);

    let mut truth_frames: Vec<Vec<(usize, ulm_core::Vec2)>> = vec![Vec::new(); n_frames];
    for track in &truth_tracks {
        for &(frame, position) in &track.points {
            truth_frames[frame].push((track.id, position));
        }
    }
    let mut pred_sets: Vec<BubbleSet> = (0..n_frames)
        .map(|frame_index| BubbleSet {
            frame_index,
            bubbles: Vec::new(),
        })
        .collect();
    for row in &pred_rows {
        pred_sets[row.frame].bubbles.push(Bubble {
            position: row.position,
            amplitude: row.amplitude,
            patch: Vec::new(),
        });
    }

    let metrics =
        evaluate(&truth_frames, &pred_sets, &pred_tracks, tol).context("evaluate stage")?;
    print_metrics(&metrics, tol);

    let metrics_path = pred_dir.join("metrics.csv");
    write_metrics_csv(&metrics, &metrics_path)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn print_metrics(m: &Metrics, tol: f64) {
    println!("match tolerance    {tol} px");
    println!("true positives     {}", m.true_positives);
    println!("false positives    {}", m.false_positives);
    println!("false negatives    {}", m.false_negatives);
    println!("precision          {:.6}", m.precision);
    println!("recall             {:.6}", m.recall);
    println!("rmse_px            {:.6}", m.rmse_px);
    println!("identity_accuracy  {:.6}", m.identity_accuracy);
}

fn write_metrics_csv(m: &Metrics, path: &Path) -> Result<()> {
    let text = format!(
        "true_positives,false_positives,false_negatives,precision,recall,rmse_px,identity_accuracy\n\
         {},{},{},{:.6},{:.6},{:.6},{:.6}\n",
        m.true_positives,
        m.false_positives,
        m.false_negatives,
        m.precision,
        m.recall,
        m.rmse_px,
        m.identity_accuracy
    );
    fs::write(path, text)?;
    Ok(())
}
