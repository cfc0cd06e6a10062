//! `impactscan` command line tool.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use impactscan::analytics::{
    bias_csv, bias_report_with_expected, bias_svg, expected_distribution, summary_stats,
};
use impactscan::candidates::{read_candidates, stratified_top, top_k, write_candidates, TiBasemap};
use impactscan::catalog::CatalogStore;
use impactscan::layout::{
    catalog_bias, write_json, ExpectedFile, OutputLayout, Selection, EXPECTED_VERSION,
};
use impactscan::pipeline::{
    build_filtered_candidates, calibrate_scorer, fit_scorer, selection_ti, PipelineConfig,
};
use impactscan::raster::{import_observation, write_observation, ArchiveSource, DirectoryArchive};
use impactscan::scan::{resume_scan, scan_to_store, RunOptions, ScanStore};
use impactscan::scorer::{read_labeled_set, write_labeled_set, CalibrationModel, ModelFile};
use impactscan::synth::SyntheticWorld;
use impactscan_server::{AppState, ServerConfig};

/// Fresh-impact survey pipeline.
///
/// Settings come from a TOML file (`--config`) with per-command flags taking
/// precedence. Every run writes its resolved settings to
/// `<output>/config/<command>.toml`. Defaults: window 300 px, stride 75 px,
/// grouping radius 600 m, non-detection below 0.5, detection at 0.95,
/// thermal-inertia bins of 100 from 0 to 1000 (last bin open), 100 per bin,
/// k = 1000, latitude band -60..60.
#[derive(Parser, Debug)]
#[command(name = "impactscan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML settings file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Output directory (overrides `paths.output`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads (overrides `parallelism`).
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic archive, thermal-inertia maps and labeled windows.
    Synth {
        #[command(flatten)]
        common: Common,
        /// World seed (overrides `world.rng_seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of sites (overrides `world.n_sites`).
        #[arg(long)]
        sites: Option<usize>,
    },
    /// Copy images with JSON sidecars into the archive.
    Import {
        #[command(flatten)]
        common: Common,
        /// Directory of `<id>.png|pgm` plus `<id>.json` files.
        #[arg(long)]
        images: PathBuf,
    },
    /// Fit the window scorer on the augmented training split.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the temperature and class biases on the held-out split.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Score every window of every observation.
    Scan {
        #[command(flatten)]
        common: Common,
        /// Continue an interrupted scan from its checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Group detections into dateable candidates with thermal inertia.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Choose candidates for review.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Selection size for top-k (overrides `k`).
        #[arg(long)]
        k: Option<usize>,
        /// Candidates per bin for stratified (overrides `per_bin`).
        #[arg(long)]
        per_bin: Option<usize>,
    },
    /// Thermal-inertia bias reports (JSON, CSV, SVG) for every selection.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run the review API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Allowed browser origin; repeat for several. Any origin if omitted.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
    },
    /// Write the catalog tables as CSV.
    Export {
        #[command(flatten)]
        common: Common,
        /// Directory for the tables (default `<output>/export`).
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Mode {
    TopK,
    Stratified,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Synth { .. } => "synth",
            Self::Import { .. } => "import",
            Self::Train { .. } => "train",
            Self::Calibrate { .. } => "calibrate",
            Self::Scan { .. } => "scan",
            Self::Build { .. } => "build",
            Self::Select { .. } => "select",
            Self::Report { .. } => "report",
            Self::Serve { .. } => "serve",
            Self::Export { .. } => "export",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::Synth { common, .. }
            | Self::Import { common, .. }
            | Self::Train { common }
            | Self::Calibrate { common }
            | Self::Scan { common, .. }
            | Self::Build { common }
            | Self::Select { common, .. }
            | Self::Report { common }
            | Self::Serve { common, .. }
            | Self::Export { common, .. } => common,
        }
    }
}

/// Settings problems exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve(cmd: &Command) -> anyhow::Result<PipelineConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)
                .map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(o) = &common.output {
        cfg.paths.output = o.clone();
    }
    if let Some(n) = common.parallelism {
        cfg.parallelism = n;
    }
    match cmd {
        Command::Synth { seed, sites, .. } => {
            if let Some(s) = seed {
                cfg.world.rng_seed = *s;
            }
            if let Some(n) = sites {
                cfg.world.n_sites = *n;
            }
        }
        Command::Select { k, per_bin, .. } => {
            if let Some(k) = k {
                cfg.k = *k;
            }
            if let Some(n) = per_bin {
                cfg.per_bin = *n;
            }
        }
        _ => {}
    }
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn echo_config(cfg: &PipelineConfig, layout: &OutputLayout, command: &str) -> anyhow::Result<()> {
    let path = layout.config_echo(command);
    std::fs::create_dir_all(path.parent().expect("config dir"))?;
    std::fs::write(&path, cfg.to_toml()).with_context(|| path.display().to_string())?;
    Ok(())
}

fn read_basemap(cfg: &PipelineConfig) -> anyhow::Result<TiBasemap> {
    TiBasemap::read_dir(&cfg.paths.basemaps)
        .with_context(|| format!("thermal-inertia maps in {}", cfg.paths.basemaps.display()))
}

fn synth(cfg: &PipelineConfig, layout: &OutputLayout) -> anyhow::Result<()> {
    let world = SyntheticWorld::generate(&cfg.world)?;
    world.write_archive(&cfg.paths.archive)?;
    world.basemap()?.write_dir(&cfg.paths.basemaps)?;
    let training =
        world.training_windows(cfg.window.size, cfg.max_train_per_class, cfg.seeds.training)?;
    write_labeled_set(&cfg.paths.training, &training)?;
    world.write_ground_truth(&layout.root().join("ground_truth.jsonl"))?;
    println!(
        "synth: {} observations, {} impacts, {} labeled windows",
        world.metas().len(),
        world.ground_truth().len(),
        training.len()
    );
    Ok(())
}

fn import(cfg: &PipelineConfig, images: &Path) -> anyhow::Result<()> {
    let mut n = 0;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(images)
        .with_context(|| images.display().to_string())?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for img in entries {
        let ext = img.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "png" | "pgm") {
            continue;
        }
        let sidecar = img.with_extension("json");
        if !sidecar.exists() {
            bail!("{} has no sidecar {}", img.display(), sidecar.display());
        }
        let obs = import_observation(&img, &sidecar)
            .with_context(|| format!("importing {}", img.display()))?;
        write_observation(&cfg.paths.archive, &obs)?;
        n += 1;
    }
    println!(
        "import: {n} observations into {}",
        cfg.paths.archive.display()
    );
    Ok(())
}

fn train(cfg: &PipelineConfig, layout: &OutputLayout) -> anyhow::Result<()> {
    let windows = read_labeled_set(&cfg.paths.training)
        .with_context(|| format!("labeled windows in {}", cfg.paths.training.display()))?;
    let (model, report) = fit_scorer(&windows, cfg)?;
    ModelFile::new(model, CalibrationModel::identity()).write(&cfg.paths.model)?;
    write_json(&layout.train_report(), &report)?;
    println!(
        "train: {} sources, {} augmented windows, model {}",
        report.n_train_sources,
        report.n_train_augmented,
        cfg.paths.model.display()
    );
    Ok(())
}

fn calibrate(cfg: &PipelineConfig, layout: &OutputLayout) -> anyhow::Result<()> {
    let windows = read_labeled_set(&cfg.paths.training)?;
    let model = ModelFile::read(&cfg.paths.model)
        .with_context(|| format!("model {}", cfg.paths.model.display()))?;
    let report = calibrate_scorer(&model.scorer, &windows, cfg)?;
    ModelFile::new(model.scorer, report.calibration).write(&cfg.paths.model)?;
    write_json(&layout.calibration_report(), &report)?;
    println!(
        "calibrate: T={:.4} b=({:.4}, {:.4}), ECE {:.4} -> {:.4} on {} held-out windows",
        report.calibration.temperature,
        report.calibration.b_neg,
        report.calibration.b_pos,
        report.ece_uncalibrated,
        report.ece_calibrated,
        report.n_held_out
    );
    Ok(())
}

fn scan(cfg: &PipelineConfig, layout: &OutputLayout, resume: bool) -> anyhow::Result<()> {
    let archive = DirectoryArchive::open(&cfg.paths.archive)?;
    let model = ModelFile::read(&cfg.paths.model)?;
    let store = ScanStore::open(&layout.scan_dir())?;
    let opts = RunOptions {
        parallelism: cfg.parallelism,
        stop_after: None,
    };
    let run = if resume { resume_scan } else { scan_to_store };
    let out = run(
        &archive,
        &model.scorer,
        &model.calibration,
        cfg.window,
        opts,
        &store,
    )?;
    println!(
        "scan: {} observations, {} windows, {} failures, {:.0} windows/s, checksum {}",
        out.grids.len(),
        out.windows_scored,
        out.failures.len(),
        out.windows_per_second(),
        out.checksum()
    );
    for f in &out.failures {
        log::warn!("{}: {}", f.observation_id, f.message);
    }
    Ok(())
}

fn build(cfg: &PipelineConfig, layout: &OutputLayout) -> anyhow::Result<()> {
    let archive = DirectoryArchive::open(&cfg.paths.archive)?;
    let grids = ScanStore::open(&layout.scan_dir())?
        .load_grids()
        .context("no scan output; run `scan` first")?;
    let map = read_basemap(cfg)?;
    let cands = build_filtered_candidates(&grids, &archive, &map, cfg)?;
    write_candidates(&layout.candidates(), &cands)?;
    println!(
        "build: {} dateable candidates, {} without thermal inertia",
        cands.len(),
        cands.iter().filter(|c| c.ti_value.is_none()).count()
    );
    Ok(())
}

fn select(cfg: &PipelineConfig, layout: &OutputLayout, mode: Mode) -> anyhow::Result<()> {
    let cands =
        read_candidates(&layout.candidates()).context("no candidates; run `build` first")?;
    let (sel, chosen) = match mode {
        Mode::TopK => (Selection::TopK, top_k(&cands, cfg.k)),
        Mode::Stratified => (
            Selection::Stratified,
            stratified_top(&cands, &cfg.bins()?, cfg.per_bin)
                .into_values()
                .flatten()
                .collect(),
        ),
    };
    let path = layout.selection(sel);
    std::fs::create_dir_all(path.parent().expect("selection dir"))?;
    write_candidates(&path, &chosen)?;
    println!(
        "select: {} {} candidates -> {}",
        chosen.len(),
        sel,
        path.display()
    );
    Ok(())
}

fn report(cfg: &PipelineConfig, layout: &OutputLayout) -> anyhow::Result<()> {
    let bins = cfg.bins()?;
    let map = read_basemap(cfg)?;
    let expected = expected_distribution(&map, (cfg.filter.lat_min, cfg.filter.lat_max), &bins)?;
    let exp_file = ExpectedFile {
        schema_version: EXPECTED_VERSION,
        lat_min: cfg.filter.lat_min,
        lat_max: cfg.filter.lat_max,
        bin_edges: bins.edges().to_vec(),
        expected: expected.clone(),
    };
    write_json(&layout.expected(), &exp_file)?;
    let mut reports = Vec::new();
    for sel in [Selection::TopK, Selection::Stratified] {
        let path = layout.selection(sel);
        if !path.exists() {
            continue;
        }
        let ti = selection_ti(&read_candidates(&path)?);
        reports.push(bias_report_with_expected(
            &ti,
            &bins,
            &expected,
            sel.as_str(),
        )?);
    }
    let review = layout.review_dir();
    if review.join("store.json").exists() {
        let entries = CatalogStore::open(&review)?.entries();
        if entries.iter().any(|e| e.thermal_inertia.is_some()) {
            reports.push(catalog_bias(&entries, &exp_file)?);
            write_json(
                &layout.reports_dir().join("catalog_stats.json"),
                &summary_stats(&entries)?,
            )?;
        }
    }
    if reports.is_empty() {
        bail!("no selections to report on; run `select` first");
    }
    for r in &reports {
        let sel: Selection = r.selection.parse().map_err(anyhow::Error::msg)?;
        write_json(&layout.bias_json(sel), r)?;
        std::fs::write(layout.bias_csv(sel), bias_csv(r))?;
        println!(
            "report: {:<10} n={:<5} D_KL={:.4}",
            r.selection, r.n_items, r.d_kl
        );
    }
    std::fs::write(layout.bias_svg(), bias_svg(&reports))?;
    Ok(())
}

fn serve(
    cfg: &PipelineConfig,
    layout: &OutputLayout,
    bind: SocketAddr,
    cors_origins: Vec<String>,
) -> anyhow::Result<()> {
    let state = AppState::open(layout.clone(), cfg.paths.archive.clone(), &cfg.bins()?)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(cfg.parallelism)
        .enable_all()
        .build()?;
    println!("serve: http://{bind}");
    rt.block_on(impactscan_server::serve(
        state,
        &ServerConfig { bind, cors_origins },
    ))?;
    Ok(())
}

fn export(layout: &OutputLayout, to: Option<PathBuf>) -> anyhow::Result<()> {
    let store =
        CatalogStore::open(&layout.review_dir()).context("no review store; run `serve` first")?;
    let dir = to.unwrap_or_else(|| layout.root().join("export"));
    std::fs::create_dir_all(&dir)?;
    let (props, images) = (dir.join("properties.csv"), dir.join("images.csv"));
    store.export_tables(&props, &images)?;
    println!(
        "export: {} entries -> {}",
        store.entries().len(),
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.command)?;
    let layout = OutputLayout::new(&cfg.paths.output);
    echo_config(&cfg, &layout, cli.command.name())?;
    match cli.command {
        Command::Synth { .. } => synth(&cfg, &layout),
        Command::Import { images, .. } => import(&cfg, &images),
        Command::Train { .. } => train(&cfg, &layout),
        Command::Calibrate { .. } => calibrate(&cfg, &layout),
        Command::Scan { resume, .. } => scan(&cfg, &layout, resume),
        Command::Build { .. } => build(&cfg, &layout),
        Command::Select { mode, .. } => select(&cfg, &layout, mode),
        Command::Report { .. } => report(&cfg, &layout),
        Command::Serve {
            bind, cors_origins, ..
        } => serve(&cfg, &layout, bind, cors_origins),
        Command::Export { to, .. } => export(&layout, to),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            eprintln!("see `impactscan --help`");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
