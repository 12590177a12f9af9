use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use fact_core::field::{read_checkpoint_header, save_checkpoint, MaskSchedule};
use fact_core::geometry::{default_samples, ConeBeamGeometry};
use fact_core::metrics::{evaluate, MetricReport, Psnr};
use fact_core::optim::meta_train;
use fact_core::projector::{forward_project, load_bundle, load_volume, make_phantom, save_bundle, save_volume, PhantomKind};
use fact_core::projector::VoxelVolume;
use fact_core::recon::{asd_pocs, reconstruct_field, sart, AsdPocsConfig, FieldInit, SartConfig, TrainConfig};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;

fn parse_kind(s: &str) -> Result<PhantomKind, String> {
    s.parse().map_err(|e: fact_core::Error| e.to_string())
}

/// Fail early when an input directory or file is absent.
fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} {} not found", path.display())))
            .with_context(|| format!("checking {what}"));
    }
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom family: shepp-logan-3d or random-ellipsoids [default: profile, shepp-logan-3d]
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<PhantomKind>,
    /// Voxels per axis of the cubic volume [default: paper 256, desk 64]
    #[arg(long)]
    pub shape: Option<usize>,
    /// Edge length of the volume in mm [default: paper 256, desk 128]
    #[arg(long)]
    pub extent_mm: Option<f64>,
    /// Seed of the random-ellipsoid draw [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ellipsoids in a random phantom, body included [default: 8]
    #[arg(long)]
    pub n_ellipsoids: Option<usize>,
    /// Output volume directory
    #[arg(long)]
    pub out: PathBuf,
}

pub fn phantom(cfg: &RunConfig, args: &PhantomArgs) -> Result<()> {
    let mut p = cfg.phantom.clone();
    p.kind = args.kind.unwrap_or(p.kind);
    p.shape = args.shape.unwrap_or(p.shape);
    p.extent_mm = args.extent_mm.unwrap_or(p.extent_mm);
    p.seed = args.seed.unwrap_or(p.seed);
    p.n_ellipsoids = args.n_ellipsoids.unwrap_or(p.n_ellipsoids);
    ensure!(p.shape > 0, "--shape must be positive");
    ensure!(p.extent_mm > 0.0, "--extent-mm must be positive");
    create_dir(&args.out)?;
    let vol = make_phantom(&p.spec(), [p.shape; 3], p.spacing())?;
    let seed = (p.kind == PhantomKind::RandomEllipsoids).then_some(p.seed);
    save_volume(&vol, seed, &args.out)?;
    info!("phantom {:?} {}³ written to {}", p.kind, p.shape, args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Input volume directory
    #[arg(long)]
    pub volume: PathBuf,
    /// Number of views over the half circle [default: paper 50, desk 30]
    #[arg(long)]
    pub views: Option<usize>,
    /// Source to rotation center, mm [default: 1000]
    #[arg(long)]
    pub dso: Option<f64>,
    /// Source to detector, mm [default: 2000]
    #[arg(long)]
    pub dsd: Option<f64>,
    /// Detector rows [default: paper 256, desk 64]
    #[arg(long)]
    pub det_rows: Option<usize>,
    /// Detector columns [default: paper 256, desk 64]
    #[arg(long)]
    pub det_cols: Option<usize>,
    /// Square detector pitch, mm [default: paper 2, desk 4]
    #[arg(long)]
    pub det_pixel: Option<f64>,
    /// Unattenuated intensity [default: 1]
    #[arg(long)]
    pub i0: Option<f64>,
    /// Samples per ray [default: three quarters of the largest volume axis]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output bundle directory
    #[arg(long)]
    pub out: PathBuf,
}

pub fn project(cfg: &RunConfig, args: &ProjectArgs) -> Result<()> {
    require(&args.volume, "volume directory")?;
    let g = &cfg.geometry;
    let pixel = args.det_pixel.map(|p| [p, p]).unwrap_or(g.det_pixel);
    let n_views = args.views.unwrap_or(g.n_views);
    ensure!(n_views > 0, "--views must be at least 1");
    let (vol, seed) = load_volume(&args.volume)?;
    let geom = ConeBeamGeometry::make_equiangular(
        args.dso.unwrap_or(g.dso),
        args.dsd.unwrap_or(g.dsd),
        args.det_rows.unwrap_or(g.det_rows),
        args.det_cols.unwrap_or(g.det_cols),
        pixel,
        n_views,
        vol.shape,
        vol.spacing,
    )?;
    let m = args.samples.or(cfg.projection.samples_per_ray).unwrap_or_else(|| default_samples(vol.shape));
    ensure!(m > 0, "--samples must be at least 1");
    create_dir(&args.out)?;
    let mut bundle = forward_project(&vol, &geom, args.i0.unwrap_or(cfg.projection.i0), m)?;
    bundle.seed = seed;
    save_bundle(&bundle, &args.out)?;
    info!("{n_views} views of {:?} written to {}", vol.shape, args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    /// Glob matching training bundle directories; repeatable
    #[arg(long, required = true)]
    pub corpus: Vec<String>,
    /// Output checkpoint file
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration log [default: checkpoint path with extension log.csv]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Outer iterations [default: paper 300, desk 60]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Inner epochs per task [default: paper 200, desk 50]
    #[arg(long)]
    pub inner_epochs: Option<usize>,
    /// Seed of the initial weights and task draws [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train the inner tasks without the coarse-to-fine mask
    #[arg(long)]
    pub no_mask: bool,
}

fn expand_corpus(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut found = BTreeSet::new();
    for pat in patterns {
        let mut any = false;
        for entry in glob::glob(pat).with_context(|| format!("bad --corpus pattern `{pat}`"))? {
            found.insert(entry?);
            any = true;
        }
        ensure!(any, "--corpus pattern `{pat}` matched nothing");
    }
    Ok(found.into_iter().collect())
}

pub fn meta(cfg: &RunConfig, args: &MetaArgs) -> Result<()> {
    let corpus = expand_corpus(&args.corpus)?;
    for p in &corpus {
        require(p, "corpus bundle")?;
    }
    let mut section = cfg.meta.clone();
    section.n_iterations = args.iterations.unwrap_or(section.n_iterations);
    section.inner_epochs = args.inner_epochs.unwrap_or(section.inner_epochs);
    section.seed = args.seed.unwrap_or(section.seed);
    let mc = section.meta_config(corpus);
    mc.validate()?;
    let schedule = if args.no_mask { None } else { Some(cfg.mask.schedule(&cfg.field)?) };
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log.csv"));
    create_parent(&args.out)?;
    create_parent(&log_path)?;
    info!("meta-training on {} bundles, {} iterations of {} epochs", mc.corpus.len(), mc.n_iterations, mc.inner_epochs);
    let (params, log) = meta_train(&mc, &cfg.field, schedule.as_ref(), section.seed)?;
    save_checkpoint(&params, &args.out)?;
    log.write_csv(&log_path)?;
    info!("checkpoint written to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Random-init field, no mask
    Naf,
    /// Meta-initialized field with the coarse-to-fine mask
    Fact,
    /// Simultaneous algebraic reconstruction
    Sart,
    /// SART alternated with total-variation descent
    Asdpocs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Input projection bundle directory
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Output directory: volume, log.csv, config.json, metrics.json
    #[arg(long)]
    pub out: PathBuf,
    /// Meta-learned initialization; required by fact
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Ground-truth volume for PSNR/SSIM tracking
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Training epochs [default: paper 1500, desk 500]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 1e-3]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable the coarse-to-fine mask for fact
    #[arg(long)]
    pub no_mask: bool,
    /// SART or ASD-POCS outer iterations [default: sart 50, asdpocs 20]
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Serialize)]
struct ResolvedRun<'a> {
    method: Method,
    bundle: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sart: Option<&'a SartConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    asd_pocs: Option<&'a AsdPocsConfig>,
}

pub fn reconstruct(cfg: &RunConfig, args: &ReconstructArgs) -> Result<()> {
    require(&args.bundle, "bundle directory")?;
    if let Some(t) = &args.truth {
        require(t, "truth volume")?;
    }
    let checkpoint = match (args.method, &args.checkpoint) {
        (Method::Fact, None) => bail!(
            "method fact needs a meta-learned initialization: run `fact meta --corpus ... --out CKPT` and pass --checkpoint CKPT"
        ),
        (Method::Fact, Some(c)) => {
            require(c, "checkpoint")?;
            Some(read_checkpoint_header(c).map(|h| (c.clone(), h))?)
        }
        (_, Some(_)) => bail!("--checkpoint only applies to method fact"),
        _ => None,
    };
    if args.no_mask && args.method != Method::Fact {
        bail!("--no-mask only applies to method fact");
    }
    let bundle = load_bundle(&args.bundle)?;
    let truth = match &args.truth {
        Some(t) => {
            let (vol, _) = load_volume(t)?;
            vol.check_geometry(&bundle.geom)?;
            Some(vol)
        }
        None => None,
    };
    create_dir(&args.out)?;

    let mut train = cfg.train.clone();
    train.max_epochs = args.epochs.unwrap_or(train.max_epochs);
    train.lr = args.lr.unwrap_or(train.lr);
    let (mut sart_cfg, mut asd_cfg) = (cfg.sart.clone(), cfg.asd_pocs.clone());
    if let Some(n) = args.iters {
        sart_cfg.n_iters = n;
        asd_cfg.n_iters = n;
    }
    let resolved_train;
    let mut run = ResolvedRun { method: args.method, bundle: &args.bundle, train: None, sart: None, asd_pocs: None };
    let (vol, log) = match args.method {
        Method::Naf | Method::Fact => {
            let (field, init, schedule) = match checkpoint {
                Some((path, header)) => {
                    let schedule = if args.no_mask { None } else { Some(cfg.mask.schedule(&header.config)?) };
                    (header.config, FieldInit::Checkpoint { path }, schedule)
                }
                None => (cfg.field.clone(), FieldInit::Random { seed: train.init_seed }, None::<MaskSchedule>),
            };
            resolved_train = train.train_config(init, schedule);
            run.train = Some(&resolved_train);
            write_json(&run, &args.out.join("config.json"))?;
            info!("{:?}: {} epochs on {} views", args.method, resolved_train.max_epochs, bundle.geom.n_views);
            let (vol, log) = reconstruct_field(&bundle, &field, &resolved_train, truth.as_ref())?;
            (vol, Some(log))
        }
        Method::Sart => {
            run.sart = Some(&sart_cfg);
            write_json(&run, &args.out.join("config.json"))?;
            (sart(&bundle, &sart_cfg)?, None)
        }
        Method::Asdpocs => {
            run.asd_pocs = Some(&asd_cfg);
            write_json(&run, &args.out.join("config.json"))?;
            (asd_pocs(&bundle, &asd_cfg)?, None)
        }
    };
    save_volume(&vol, bundle.seed, &args.out)?;
    if let Some(log) = &log {
        log.write_csv(&args.out.join("log.csv"))?;
    }
    if let Some(t) = &truth {
        let report = evaluate(&vol, t, None)?;
        info!("PSNR {} SSIM {:.4}", report.psnr_db, report.ssim);
        write_json(&report, &args.out.join("metrics.json"))?;
    }
    info!("reconstruction written to {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reconstructed volume directories; one JSON per run, plus a CSV when several
    #[arg(long, required = true, num_args = 1..)]
    pub recon: Vec<PathBuf>,
    /// Ground-truth volume directory
    #[arg(long)]
    pub truth: PathBuf,
    /// JSON file for one run, or a directory for several
    #[arg(long)]
    pub out: PathBuf,
    /// Intensity range for PSNR/SSIM [default: max minus min of the truth]
    #[arg(long)]
    pub range: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    run: &'a str,
    psnr_db: String,
    ssim: f64,
    data_range: f64,
}

fn run_names(recon: &[PathBuf]) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(recon.len());
    for p in recon {
        let name = p
            .file_name()
            .and_then(|n| n.to_str())
            .with_context(|| format!("cannot name run {}", p.display()))?
            .to_owned();
        ensure!(seen.insert(name.clone()), "two --recon directories share the name `{name}`");
        names.push(name);
    }
    Ok(names)
}

fn report_for(recon: &Path, truth: &VoxelVolume, range: Option<f64>) -> Result<MetricReport> {
    let (vol, _) = load_volume(recon)?;
    Ok(evaluate(&vol, truth, range)?)
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    require(&args.truth, "truth volume")?;
    for r in &args.recon {
        require(r, "reconstruction")?;
    }
    let names = run_names(&args.recon)?;
    let (truth, _) = load_volume(&args.truth)?;
    if let [single] = args.recon.as_slice() {
        create_parent(&args.out)?;
        let report = report_for(single, &truth, args.range)?;
        info!("{}: PSNR {} SSIM {:.4}", names[0], report.psnr_db, report.ssim);
        return write_json(&report, &args.out);
    }
    create_dir(&args.out)?;
    let csv_path = args.out.join("summary.csv");
    let mut csv = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for (recon, name) in args.recon.iter().zip(&names) {
        let report = report_for(recon, &truth, args.range)?;
        info!("{name}: PSNR {} SSIM {:.4}", report.psnr_db, report.ssim);
        write_json(&report, &args.out.join(format!("{name}.json")))?;
        let psnr_db = match report.psnr_db {
            Psnr::Db(v) => v.to_string(),
            Psnr::Identical => "identical".into(),
        };
        csv.serialize(SummaryRow { run: name, psnr_db, ssim: report.ssim, data_range: report.data_range })?;
    }
    csv.flush().with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(())
}
