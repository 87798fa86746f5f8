use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, Context};
use bami_core::backend::{load_backend_file, BackendError, BackendRegistry, Backends, CallContext};
use bami_core::eval::{self, DatasetAdapter, EvalError, EvalOptions, EvalReport, ReportMeta};
use bami_core::image_ops::{load_image, ImageError, Raster};
use bami_core::mpd::{self, MpdConfig, MpdError};
use bami_core::pipeline::{locator, Locator, PipelineError};
use bami_core::simgen::{write_bundle, SimgenConfig, SimgenError};
use serde_json::{json, Value};

use crate::manifest::{run_dir, sha256_hex, BackendIds, ManifestFile, RunManifest};
use crate::{BenchArgs, CmdResult, Failure, GroundArgs, MpdArgs, SimgenArgs, Status};

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(Status::Usage, e)
}

fn io(e: impl Into<anyhow::Error>) -> Failure {
    Failure::new(Status::Io, e)
}

fn backend_failure(e: BackendError) -> Failure {
    let status = match &e {
        BackendError::Config(_) => Status::Usage,
        e if e.is_parse() => Status::Parse,
        _ => Status::Backend,
    };
    Failure::new(status, e)
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let status = match &e {
        PipelineError::Config(_) => Status::Usage,
        PipelineError::Grounding { source, .. } => match source {
            BackendError::Config(_) => Status::Usage,
            s if s.is_parse() => Status::Parse,
            _ => Status::Backend,
        },
        PipelineError::Geometry(_) | PipelineError::Image(_) => Status::Internal,
    };
    Failure::new(status, e)
}

fn eval_failure(e: EvalError) -> Failure {
    let status = match &e {
        EvalError::Pool(_) => Status::Internal,
        _ => Status::Data,
    };
    Failure::new(status, e)
}

fn image_input(path: &Path) -> Result<Raster, Failure> {
    load_image(path).map_err(|e| Failure::new(Status::Data, e))
}

fn build_backends(path: &Path) -> Result<(Backends, Value), Failure> {
    let (file, base) = load_backend_file(path).map_err(backend_failure)?;
    let backends = BackendRegistry::default().build(&file, &base).map_err(backend_failure)?;
    let snapshot = serde_json::to_value(&file).map_err(|e| Failure::new(Status::Internal, e))?;
    Ok((backends, snapshot))
}

fn backend_ids(b: &Backends) -> BackendIds {
    let (grounding, correction) = b.ids();
    BackendIds { grounding, correction }
}

fn pick_locator(mode: &str, args: &crate::BamiArgs) -> Result<Box<dyn Locator>, Failure> {
    locator(mode, args.config()).map_err(pipeline_failure)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::new(Status::Internal, e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(io)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(io)
}

fn image_key(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Runs `body`, then records its exit status in the manifest.
fn with_manifest(manifest: ManifestFile, body: impl FnOnce() -> CmdResult) -> CmdResult {
    let result = body();
    let code = match &result {
        Ok(()) => Status::Ok,
        Err(f) => f.status,
    };
    manifest.finish(code as i32).map_err(io)?;
    result
}

pub fn ground(a: GroundArgs) -> CmdResult {
    let loc = pick_locator(&a.mode, &a.bami)?;
    let img = image_input(&a.image)?;
    let (backends, backend_snapshot) = build_backends(&a.backend_config)?;
    let out = run_dir(a.out.as_deref()).map_err(io)?;
    let config = json!({
        "mode": loc.name(),
        "bami": a.bami.config(),
        "query": a.query,
        "sample_id": a.sample_id,
        "backend_file": backend_snapshot,
    });
    let manifest = RunManifest::new("ground", a.seed, config, backend_ids(&backends))
        .input("image", &a.image)
        .and_then(|m| m.input("backend_config", &a.backend_config))
        .map_err(io)?;
    let manifest = ManifestFile::create(&out, manifest).map_err(io)?;

    with_manifest(manifest, || {
        let ctx = CallContext::new(a.sample_id.clone(), image_key(&a.image), a.seed);
        let located = loc.locate(&backends, &a.query, &img, &ctx).map_err(pipeline_failure)?;
        let trace_path = match &located.trace {
            Some(trace) => {
                let p = out.join("trace.json");
                write_json(&p, trace)?;
                Some(p)
            }
            None => None,
        };
        println!(
            "{}",
            json!({ "point": located.point, "trace_path": trace_path, "out": out })
        );
        Ok(())
    })
}

pub fn bench(a: BenchArgs) -> CmdResult {
    if let Some(paths) = &a.compare {
        return compare(&paths[0], &paths[1]);
    }
    let (Some(dataset), Some(mode), Some(backend_config)) = (&a.dataset, &a.mode, &a.backend_config) else {
        return Err(usage(anyhow!("--dataset, --mode, and --backend-config are required")));
    };
    let adapter: DatasetAdapter = a.adapter.parse().map_err(|e: String| usage(anyhow!(e)))?;
    let loc = pick_locator(mode, &a.bami)?;
    let data = eval::load_dataset(dataset, adapter).map_err(eval_failure)?;
    let (backends, backend_snapshot) = build_backends(backend_config)?;
    let out = run_dir(a.out.as_deref()).map_err(io)?;

    let config = json!({
        "mode": loc.name(),
        "bami": a.bami.config(),
        "adapter": adapter,
        "jobs": a.jobs,
        "backend_file": backend_snapshot,
    });
    let config_hash = sha256_hex(&serde_json::to_vec(&config).expect("config serializes"));
    let manifest = RunManifest::new("bench", a.seed, config, backend_ids(&backends))
        .input("dataset", dataset)
        .and_then(|m| m.input("backend_config", backend_config))
        .map_err(io)?;
    let started = manifest.started_at.clone();
    let manifest = ManifestFile::create(&out, manifest).map_err(io)?;

    with_manifest(manifest, || {
        let opts = EvalOptions {
            jobs: a.jobs,
            run_seed: a.seed,
            trace_dir: (loc.name() == "bami").then(|| out.join("traces")),
        };
        let outcomes = eval::evaluate(&data.samples, loc.as_ref(), &backends, &opts).map_err(eval_failure)?;

        let mut log = create(&out.join("outcomes.jsonl"))?;
        eval::write_outcomes_jsonl(&outcomes, &mut log).map_err(io)?;
        drop(log);

        let (grounding_backend, correction_backend) = backends.ids();
        let meta = ReportMeta {
            label: a.label.clone().unwrap_or_else(|| loc.name().to_string()),
            averaging: String::new(),
            grounding_backend,
            correction_backend,
            config_hash,
            seed: a.seed,
            timestamp: started,
            dataset: dataset.display().to_string(),
            conversions: data.conversions.clone(),
        };
        let report = eval::report(&outcomes, &data.samples, meta);
        write_json(&out.join("report.json"), &report)?;
        let table = report.to_table();
        std::fs::write(out.join("report.txt"), &table).map_err(io)?;
        print!("{table}");
        eprintln!("wrote {}", out.display());

        let failed = outcomes.iter().filter(|o| o.failure.is_some()).count();
        if failed > 0 {
            log::warn!("{failed} of {} samples failed; see outcomes.jsonl", outcomes.len());
        }
        if !outcomes.is_empty() && failed == outcomes.len() {
            let all_parse = outcomes.iter().all(|o| o.failure.as_deref() == Some("parse"));
            let status = if all_parse { Status::Parse } else { Status::Backend };
            return Err(Failure::new(status, anyhow!("every sample failed")));
        }
        Ok(())
    })
}

fn read_report(path: &Path) -> Result<EvalReport, Failure> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(|e| Failure::new(Status::Data, e))?;
    serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is not a report", path.display()))
        .map_err(|e| Failure::new(Status::Data, e))
}

fn compare(a: &Path, b: &Path) -> CmdResult {
    let ra = read_report(a)?;
    let rb = read_report(b)?;
    let cmp = eval::compare(&ra, &rb).map_err(eval_failure)?;
    print!("{}", cmp.to_table());
    Ok(())
}

fn mpd_failure(e: MpdError) -> Failure {
    let status = match &e {
        MpdError::Config(_) | MpdError::Image(ImageError::InvalidGrid { .. }) => Status::Usage,
        MpdError::EmptyResult { .. } => Status::Backend,
        MpdError::Image(_) => Status::Internal,
    };
    Failure::new(status, e)
}

pub fn mpd(a: MpdArgs) -> CmdResult {
    let cfg = MpdConfig {
        grid: a.grid,
        samples: a.samples,
        alpha_min: a.alpha.0,
        alpha_max: a.alpha.1,
        seed: a.seed,
    };
    cfg.validate().map_err(mpd_failure)?;
    let img = image_input(&a.image)?;
    if !cfg.grid.fits(img.dims()) {
        return Err(usage(anyhow!(
            "grid {}x{} does not fit a {} image",
            cfg.grid.rows,
            cfg.grid.cols,
            img.dims()
        )));
    }
    let (backends, backend_snapshot) = build_backends(&a.backend_config)?;
    let out = run_dir(a.out.as_deref()).map_err(io)?;
    let config = json!({
        "mpd": cfg,
        "query": a.query,
        "sample_id": a.sample_id,
        "jobs": a.jobs,
        "backend_file": backend_snapshot,
    });
    let manifest = RunManifest::new("mpd", a.seed, config, backend_ids(&backends))
        .input("image", &a.image)
        .and_then(|m| m.input("backend_config", &a.backend_config))
        .map_err(io)?;
    let manifest = ManifestFile::create(&out, manifest).map_err(io)?;

    with_manifest(manifest, || {
        let pool = rayon_pool(a.jobs)?;
        let ctx = CallContext::new(a.sample_id.clone(), image_key(&a.image), a.seed);
        let result = pool
            .install(|| mpd::run_mpd(backends.grounding.as_ref(), &a.query, &img, &cfg, &ctx))
            .map_err(mpd_failure)?;

        let mut scatter = create(&out.join("scatter.csv"))?;
        mpd::write_scatter_csv(&result.points, &mut scatter).map_err(io)?;
        let mut heat = create(&out.join("heatmap.csv"))?;
        mpd::write_heatmap_csv(&result.heat, &mut heat).map_err(io)?;
        write_json(&out.join("mpd.json"), &result)?;
        if a.overlay {
            let overlay = mpd::heatmap_overlay(&img, &result.heat, cfg.grid).map_err(|e| Failure::new(Status::Internal, e))?;
            overlay.save_png(&out.join("overlay.png")).map_err(io)?;
        }
        println!(
            "{}",
            json!({ "points": result.points.len(), "dropped": result.dropped(), "out": out })
        );
        Ok(())
    })
}

fn rayon_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::new(Status::Internal, e))
}

pub fn simgen(a: SimgenArgs) -> CmdResult {
    let mut cfg = SimgenConfig::new(a.dims, a.elements, a.distractors, a.seed);
    cfg.scenes = a.scenes;
    cfg.min_side = a.min_side;
    cfg.max_side = a.max_side;
    cfg.precision_sigma_rel = a.sigma;
    cfg.ambig_prob = a.ambig;
    cfg.output = a.output;
    let out = run_dir(a.out.as_deref()).map_err(io)?;
    let bundle = write_bundle(&cfg, &out).map_err(|e| {
        let status = match &e {
            SimgenError::Io { .. } => Status::Io,
            SimgenError::Image(_) => Status::Internal,
            _ => Status::Usage,
        };
        Failure::new(status, e)
    })?;
    for f in &bundle.files {
        println!("{}", f.display());
    }
    Ok(())
}
