use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rpsf_core::eval::{self, GroupKey, Metrics};
use rpsf_core::io;
use rpsf_core::losses::{LossConfig, NoiseFamily};
use rpsf_core::postproc::{self, ExtractParams, Metric};
use rpsf_core::scene::{self, DatasetManifest, DatasetSpec, Density};
use rpsf_core::solvers::{self, Init, SolverParams, StepRule};
use rpsf_core::{build_dictionary, Error, NoiseKind, NoiseModel, OpticalConfig, PsfDictionary, Sigma};

use crate::args::*;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
    /// A replay produced different bytes than recorded.
    Mismatch(Vec<String>),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Mismatch(files) => write!(f, "replay differs from the manifest in: {}", files.join(", ")),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Config(_) | Error::Range(_)) => 1,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Core(_) | CliError::Mismatch(_) => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    /// Command name and its full parameter set; input paths are absolute,
    /// the output directory is not recorded.
    pub invocation: Command,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    /// Relative to the run directory.
    pub outputs: Vec<FileHash>,
}

#[derive(Default)]
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }.into())
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Make every input path absolute so the recorded invocation does not depend
/// on the working directory.
fn normalize(cmd: &mut Command) -> CliResult<()> {
    match cmd {
        Command::Psf(_) => {}
        Command::Simulate(a) => a.dictionary = absolute(&a.dictionary)?,
        Command::Reconstruct(a) => {
            a.dictionary = absolute(&a.dictionary)?;
            a.dataset = absolute(&a.dataset)?;
        }
        Command::Refine(a) => {
            a.dictionary = absolute(&a.dictionary)?;
            a.dataset = absolute(&a.dataset)?;
        }
        Command::Evaluate(a) => {
            for r in a.runs.iter_mut() {
                *r = absolute(r)?;
            }
        }
    }
    Ok(())
}

/// Run a command and write its manifest; returns the manifest.
pub fn execute(mut cmd: Command) -> CliResult<RunManifest> {
    normalize(&mut cmd)?;
    let out = cmd.out().clone();
    fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let outcome = match &cmd {
        Command::Psf(a) => psf(a, &out)?,
        Command::Simulate(a) => simulate(a, &out)?,
        Command::Reconstruct(a) => reconstruct(a, &out)?,
        Command::Refine(a) => refine(a, &out)?,
        Command::Evaluate(a) => evaluate(a, &out)?,
    };
    let mut inputs = Vec::new();
    for p in &outcome.inputs {
        inputs.push(FileHash {
            path: p.to_string_lossy().into_owned(),
            sha256: io::sha256_file(p)?,
        });
    }
    let mut outputs = Vec::new();
    let mut rels = outcome.outputs.clone();
    rels.sort();
    rels.dedup();
    for rel in &rels {
        outputs.push(FileHash {
            path: rel_string(rel),
            sha256: io::sha256_file(out.join(rel))?,
        });
    }
    let manifest = RunManifest {
        format: "rpsf-run".into(),
        version: io::FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        invocation: cmd,
        seeds: outcome.seeds,
        inputs,
        outputs,
    };
    io::write_json(out.join(RUN_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Re-execute a manifest into `out` (default: the manifest's directory) and
/// check every output against the recorded hash.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> CliResult<RunManifest> {
    let recorded: RunManifest = io::read_json(manifest_path)?;
    if recorded.format != "rpsf-run" {
        return Err(Error::Schema(format!("{} is not a run manifest", manifest_path.display())).into());
    }
    if recorded.tool_version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "warning: manifest written by version {}, replaying with {}",
            recorded.tool_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    for input in &recorded.inputs {
        let now = io::sha256_file(&input.path)?;
        if now != input.sha256 {
            eprintln!("warning: input {} changed since the run was recorded", input.path);
        }
    }
    let dir = match out {
        Some(d) => d,
        None => manifest_path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let mut cmd = recorded.invocation.clone();
    cmd.set_out(dir);
    let fresh = execute(cmd)?;
    let differing: Vec<String> = recorded
        .outputs
        .iter()
        .filter(|o| !fresh.outputs.contains(o))
        .map(|o| o.path.clone())
        .collect();
    if !differing.is_empty() {
        return Err(CliError::Mismatch(differing));
    }
    Ok(fresh)
}

fn psf(a: &PsfArgs, out: &Path) -> CliResult<Outcome> {
    let h = a.size as usize;
    let w = a.width.unwrap_or(a.size) as usize;
    let mut cfg = OpticalConfig::new(a.zones as usize, a.depths as usize, (h, w));
    cfg.pupil_samples = a.pupil_samples;
    cfg.pixel_pitch = a.pixel_pitch;
    cfg.validate()?;
    let dict = build_dictionary(&cfg)?;
    let mut outcome = Outcome::default();
    io::write_dictionary(out.join("dictionary.rpsf"), &dict)?;
    outcome.outputs.push("dictionary.rpsf".into());
    if a.png {
        for k in 0..dict.depth() {
            let rel = PathBuf::from(format!("slice_{k:03}.png"));
            io::export_png(out.join(&rel), dict.slice(k))?;
            outcome.outputs.push(rel);
        }
    }
    Ok(outcome)
}

fn parse_range(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("density range {s:?} is not of the form LO:HI"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo = lo.trim().parse().map_err(|_| bad())?;
    let hi = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

fn noise_model(a: &SimulateArgs) -> NoiseModel {
    match a.noise {
        NoiseArg::Poisson => NoiseModel::poisson(a.b),
        NoiseArg::Gaussian => {
            let sigma = match (a.sigma, a.sigma_frac) {
                (Some(s), _) => Sigma::Absolute(s),
                (None, f) => Sigma::FractionOfMax(f.unwrap_or(0.1)),
            };
            NoiseModel::gaussian(sigma, a.b)
        }
    }
}

fn simulate(a: &SimulateArgs, out: &Path) -> CliResult<Outcome> {
    if a.noise == NoiseArg::Poisson && (a.sigma.is_some() || a.sigma_frac.is_some()) {
        return Err(CliError::Usage("--sigma/--sigma-frac only apply to --noise gaussian".into()));
    }
    let dict = io::read_dictionary(&a.dictionary)?;
    let (h, w, d) = dict.grid();
    let density = match (a.density, &a.density_range) {
        (Some(n), _) => Density::Fixed(n),
        (None, Some(r)) => {
            let (lo, hi) = parse_range(r)?;
            Density::Range { lo, hi }
        }
        (None, None) => Density::Range { lo: 5, hi: 50 },
    };
    let spec = DatasetSpec {
        num_images: a.images,
        flux_mean: a.flux_mean,
        min_separation: a.min_separation,
        margin: a.margin,
        ..DatasetSpec::new((h, w), d, density, a.seed)
    };
    let noise = noise_model(a);
    let mut outcome = Outcome {
        inputs: vec![a.dictionary.clone()],
        ..Default::default()
    };
    outcome.seeds.insert("seed".into(), a.seed);
    let collect = |dir: &Path, m: &DatasetManifest, into: &mut Vec<PathBuf>| {
        into.push(dir.join(scene::MANIFEST_FILE));
        into.extend(m.files().into_iter().map(|f| dir.join(f)));
    };
    if a.protocol {
        let proto = scene::generate_protocol(
            &spec,
            &scene::PROTOCOL_DENSITIES,
            a.images_per_density,
            &dict,
            &noise,
            out,
        )?;
        outcome.outputs.push("protocol.json".into());
        for (_, rel) in &proto.datasets {
            let m = DatasetManifest::load(out.join(rel))?;
            collect(rel, &m, &mut outcome.outputs);
        }
    } else {
        let m = scene::generate_dataset(&spec, &dict, &noise, out)?;
        collect(Path::new(""), &m, &mut outcome.outputs);
    }
    Ok(outcome)
}

fn load_dataset(dir: &Path, dict: &PsfDictionary) -> CliResult<DatasetManifest> {
    let m = DatasetManifest::load(dir)?;
    let hash = io::sha256_hex(&io::dictionary_bytes(dict));
    if hash != m.dictionary_sha256 {
        eprintln!("warning: dataset {} was simulated with a different dictionary", dir.display());
    }
    Ok(m)
}

fn family(noise: &NoiseModel) -> NoiseFamily {
    match noise.kind {
        NoiseKind::Gaussian { .. } => NoiseFamily::Gaussian,
        NoiseKind::Poisson => NoiseFamily::Poisson,
    }
}

fn reconstruct(a: &ReconstructArgs, out: &Path) -> CliResult<Outcome> {
    let dict = io::read_dictionary(&a.dictionary)?;
    let data = load_dataset(&a.dataset, &dict)?;
    let expected = match a.method {
        MethodArg::L2Cel0 => NoiseFamily::Gaussian,
        MethodArg::KlNc => NoiseFamily::Poisson,
    };
    if family(&data.noise) != expected {
        eprintln!(
            "warning: running {:?} on {}-noise data",
            a.method,
            data.noise.name()
        );
    }
    let mut params = match a.method {
        MethodArg::L2Cel0 => SolverParams::l2_cel0(),
        MethodArg::KlNc => SolverParams::kl_nc(),
    };
    if let Some(mu) = a.mu {
        params.mu = Some(mu);
    }
    params.a = a.a;
    params.b = a.b;
    if let Some(n) = a.max_outer {
        params.max_outer = n;
    }
    if let Some(n) = a.max_inner {
        params.max_inner = n;
    }
    params.tolerance = a.tolerance;
    params.init = match a.init {
        InitArg::Zeros => Init::Zeros,
        InitArg::Adjoint => Init::Adjoint,
    };
    if let Some(step) = a.fixed_step {
        params.step = StepRule::Fixed { step };
    }
    params.validate()?;
    let op = rpsf_core::ForwardOperator::new(&dict);

    let results: Vec<CliResult<Vec<PathBuf>>> = data
        .images
        .par_iter()
        .map(|rec| {
            let g = io::read_image(a.dataset.join(&rec.observed))?;
            let report = match a.method {
                MethodArg::L2Cel0 => solvers::solve_l2_cel0(&g, &op, &params)?,
                MethodArg::KlNc => solvers::solve_kl_nc(&g, &op, &params)?,
            };
            eprintln!(
                "image {:05}: {} iterations, {:.2}s",
                rec.index, report.iterations, report.wall_time
            );
            write_solution(out, rec.index, &report)
        })
        .collect();
    let mut outcome = Outcome {
        inputs: dataset_inputs(&a.dictionary, &a.dataset, &data, false),
        ..Default::default()
    };
    for r in results {
        outcome.outputs.extend(r?);
    }
    Ok(outcome)
}

fn write_solution(out: &Path, index: usize, report: &solvers::SolveReport) -> CliResult<Vec<PathBuf>> {
    let vol = PathBuf::from(format!("img_{index:05}_volume.rvol"));
    let rep = PathBuf::from(format!("img_{index:05}_report.json"));
    io::write_volume(out.join(&vol), &report.volume)?;
    io::write_json(out.join(&rep), &report.summary())?;
    Ok(vec![vol, rep])
}

fn dataset_inputs(dict: &Path, dir: &Path, data: &DatasetManifest, scenes: bool) -> Vec<PathBuf> {
    let mut v = vec![dict.to_path_buf(), dir.join(scene::MANIFEST_FILE)];
    for rec in &data.images {
        v.push(dir.join(&rec.observed));
        if scenes {
            v.push(dir.join(&rec.scene));
        }
    }
    v
}

fn refine(a: &RefineArgs, out: &Path) -> CliResult<Outcome> {
    let dict = io::read_dictionary(&a.dictionary)?;
    let data = load_dataset(&a.dataset, &dict)?;
    let fam = family(&data.noise);
    let base = match fam {
        NoiseFamily::Gaussian => LossConfig::gaussian_defaults(1.0, data.noise.background),
        NoiseFamily::Poisson => LossConfig::poisson_defaults(a.a, data.noise.background),
    };
    let cfg = LossConfig {
        w1: a.w1.unwrap_or(base.w1),
        w2: a.w2.unwrap_or(base.w2),
        w3: a.w3.unwrap_or(base.w3),
        a: a.a,
        kernel_sigma: a.kernel_sigma,
        kernel_radius: a.kernel_radius,
        ..base
    };
    let params = SolverParams {
        max_inner: a.max_iter,
        init: Init::Zeros,
        ..SolverParams::l2_cel0()
    };
    params.validate()?;
    let op = rpsf_core::ForwardOperator::new(&dict);
    let grid = dict.grid();
    let results: Vec<CliResult<Vec<PathBuf>>> = data
        .images
        .par_iter()
        .map(|rec| {
            let g = io::read_image(a.dataset.join(&rec.observed))?;
            let gt = scene::rasterize(&scene::read_scene(a.dataset.join(&rec.scene))?, grid)?;
            let mut c = cfg.clone();
            c.mu = a.mu.unwrap_or_else(|| solvers::default_cel0_mu(&g).max(f64::MIN_POSITIVE));
            c.validate()?;
            let report = solvers::refine_with_composite(&g, &gt, &op, &c, &params)?;
            write_solution(out, rec.index, &report)
        })
        .collect();
    let mut outcome = Outcome {
        inputs: dataset_inputs(&a.dictionary, &a.dataset, &data, true),
        ..Default::default()
    };
    for r in results {
        outcome.outputs.extend(r?);
    }
    Ok(outcome)
}

/// Which composite terms a refine run had switched on, e.g. `D+R+MSE`.
fn composite_label(a: &RefineArgs, fam: NoiseFamily) -> String {
    let base = match fam {
        NoiseFamily::Gaussian => LossConfig::gaussian_defaults(1.0, 0.0),
        NoiseFamily::Poisson => LossConfig::poisson_defaults(1.0, 0.0),
    };
    let mut parts = Vec::new();
    if a.w1.unwrap_or(base.w1) > 0.0 {
        parts.push("D");
    }
    if a.w2.unwrap_or(base.w2) > 0.0 {
        parts.push("R");
    }
    if a.w3.unwrap_or(base.w3) > 0.0 {
        parts.push("MSE");
    }
    parts.join("+")
}

#[derive(Debug, Serialize)]
struct ImageRow<'a> {
    run: usize,
    image: usize,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

fn evaluate(a: &EvaluateArgs, out: &Path) -> CliResult<Outcome> {
    let extract = ExtractParams {
        threshold_frac: a.threshold_frac,
        cluster_radius: a.cluster_radius,
        metric: match a.metric {
            MetricArg::Euclidean3d => Metric::Euclidean3d,
            MetricArg::Transverse => Metric::Transverse,
        },
    };
    let mut outcome = Outcome::default();
    let mut rows: Vec<(usize, usize, Metrics)> = Vec::new();
    for (ri, run_dir) in a.runs.iter().enumerate() {
        let run: RunManifest = io::read_json(run_dir.join(RUN_MANIFEST))?;
        outcome.inputs.push(run_dir.join(RUN_MANIFEST));
        let (dataset, method) = match &run.invocation {
            Command::Reconstruct(r) => (
                r.dataset.clone(),
                match r.method {
                    MethodArg::L2Cel0 => "l2-cel0".to_string(),
                    MethodArg::KlNc => "kl-nc".to_string(),
                },
            ),
            Command::Refine(r) => {
                let m = DatasetManifest::load(&r.dataset)?;
                (r.dataset.clone(), composite_label(r, family(&m.noise)))
            }
            other => {
                return Err(Error::Schema(format!(
                    "{} holds a {} run, not a reconstruction",
                    run_dir.display(),
                    other.name()
                ))
                .into())
            }
        };
        let data = DatasetManifest::load(&dataset)?;
        let points_dir = PathBuf::from(format!("points_{ri:02}"));
        let scored: Vec<CliResult<(usize, Metrics, PathBuf)>> = data
            .images
            .par_iter()
            .map(|rec| {
                let vol = io::read_volume(run_dir.join(format!("img_{:05}_volume.rvol", rec.index)))?;
                let gt = scene::read_scene(dataset.join(&rec.scene))?;
                let pts = postproc::extract_points(&vol, &extract)?;
                let rel = points_dir.join(format!("img_{:05}_points.json", rec.index));
                io::write_json(out.join(&rel), &pts)?;
                let m = eval::match_points(&gt, &pts, a.match_threshold, extract.metric)?;
                let metrics = eval::precision_recall(&m, gt.len(), pts.len())?.labeled(
                    &method,
                    data.noise.name(),
                    data.noise.level(),
                );
                Ok((rec.index, metrics, rel))
            })
            .collect();
        for rec in &data.images {
            outcome.inputs.push(run_dir.join(format!("img_{:05}_volume.rvol", rec.index)));
            outcome.inputs.push(dataset.join(&rec.scene));
        }
        for s in scored {
            let (idx, m, rel) = s?;
            outcome.outputs.push(rel);
            rows.push((ri, idx, m));
        }
    }

    let image_rows: Vec<ImageRow> = rows
        .iter()
        .map(|(run, image, metrics)| ImageRow {
            run: *run,
            image: *image,
            metrics,
        })
        .collect();
    io::write_json(out.join("per_image.json"), &image_rows)?;
    outcome.outputs.push("per_image.json".into());

    let group_by = match a.sweep {
        SweepArg::None | SweepArg::Density => vec![GroupKey::Method, GroupKey::Density],
        SweepArg::NoiseLevel => vec![GroupKey::Method, GroupKey::NoiseLevel],
    };
    let metrics: Vec<Metrics> = rows.into_iter().map(|(_, _, m)| m).collect();
    let report = eval::aggregate_report(&metrics, &group_by)?;
    report.write_csv(out.join("report.csv"))?;
    io::write_json(out.join("report.json"), &report)?;
    outcome.outputs.push("report.csv".into());
    outcome.outputs.push("report.json".into());
    if a.sweep == SweepArg::NoiseLevel {
        eval::plot_sweep(&report, out.join("sweep.png"))?;
        outcome.outputs.push("sweep.png".into());
    }
    Ok(outcome)
}
