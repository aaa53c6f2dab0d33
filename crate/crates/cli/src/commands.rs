use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use faithful_core::aligner::{load_checkpoint, save_checkpoint, AlignerConfig, AlignerParams, Pooling};
use faithful_core::analysis::{
    ablation_grid, activation_stats, perturbation_sweep, project_2d, separation_ratio, tokenizer_mean_reps,
    write_ablation_csv, write_perturbation_csv, write_projection_csv, PoseBucket, SMOOTHING_WINDOW,
};
use faithful_core::curation::{curate as run_curation, parse_tracks};
use faithful_core::trainer::{build_world, face_reps, grad_check, train_with, GradCheckConfig, TrainOptions, METRICS_HEADER};
use log::info;
use serde::Serialize;

use crate::config::{resolve_seed, Override, Overrides, RunConfig, SeedSource};
use crate::{Analysis, CommonAnalyze, CurateArgs, GradcheckArgs, TrainArgs};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
    Verification(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(e) | Failure::Numerical(e) => format!("{e:#}"),
            Failure::Verification(m) => m.clone(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<faithful_core::Error>() {
            Some(faithful_core::Error::NumericalAbort { .. } | faithful_core::Error::NonFinite(_)) => Failure::Numerical(e),
            _ => Failure::Usage(e),
        }
    }
}

impl From<faithful_core::Error> for Failure {
    fn from(e: faithful_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct RunMeta<'a, R: Serialize> {
    command: &'a str,
    config_path: Option<&'a Path>,
    seed: u64,
    seed_source: SeedSource,
    overrides: &'a [Override],
    config: &'a RunConfig,
    results: R,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config)?;
    let mut ov = Overrides::default();
    ov.apply("output_dir", args.output_dir, &mut cfg.output_dir);
    ov.apply("train.steps", args.steps, &mut cfg.train.steps);
    ov.apply("train.pooling", args.pooling, &mut cfg.train.pooling);
    ov.apply("train.n_pairs_per_batch", args.n_pairs, &mut cfg.train.n_pairs_per_batch);
    ov.apply("train.learning_rate", args.learning_rate, &mut cfg.train.learning_rate);
    let (seed, source) = resolve_seed(args.seed, Some(&cfg))?;
    cfg.train.seed = seed;
    cfg.validate()?;

    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics_file =
        BufWriter::new(File::create(&metrics_path).with_context(|| format!("cannot create {}", metrics_path.display()))?);
    writeln!(metrics_file, "{METRICS_HEADER}").context("writing metrics")?;
    let mut on_step = |r: &faithful_core::trainer::StepRecord| -> faithful_core::Result<()> {
        writeln!(metrics_file, "{}", r.csv_row())?;
        Ok(())
    };
    info!("training {} steps with seed {seed}", cfg.train.steps);
    let outcome = train_with(&cfg.train, &cfg.world, TrainOptions { on_step: Some(&mut on_step), ..Default::default() });
    metrics_file.flush().context("writing metrics")?;
    let (params, metrics) = outcome?;

    save_checkpoint(&out.join("checkpoint.json"), &params, &cfg.train.aligner())?;
    let last = metrics.records.last();
    #[derive(Serialize)]
    struct Results {
        final_loss: Option<f64>,
        final_smoothed_loss: Option<f64>,
        mi_lower_bound: Option<f64>,
        retrieval_accuracy: Option<f64>,
    }
    let results = Results {
        final_loss: last.map(|r| r.pia_loss),
        final_smoothed_loss: metrics.final_smoothed_loss(SMOOTHING_WINDOW),
        mi_lower_bound: last.map(|r| r.mi_lower_bound),
        retrieval_accuracy: metrics.final_retrieval,
    };
    println!("final loss: {}", fmt_opt(results.final_loss));
    println!("smoothed loss (window {SMOOTHING_WINDOW}): {}", fmt_opt(results.final_smoothed_loss));
    println!("MI lower bound: {}", fmt_opt(results.mi_lower_bound));
    println!("retrieval accuracy: {}", fmt_opt(results.retrieval_accuracy));
    let meta = RunMeta {
        command: "train",
        config_path: Some(&args.config),
        seed,
        seed_source: source,
        overrides: &ov.0,
        config: &cfg,
        results,
    };
    write_json(&out.join("run_meta.json"), &meta)?;
    Ok(())
}

pub fn curate(args: CurateArgs) -> CmdResult {
    let cfg = match &args.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let mut policy = cfg.as_ref().map(|c| c.curation.clone()).unwrap_or_default();
    let mut ov = Overrides::default();
    ov.apply("curation.threshold", args.threshold, &mut policy.threshold);
    ov.apply("curation.max_faces", args.max_faces, &mut policy.max_faces);
    if let Some(w) = args.median_window {
        ov.apply("curation.median_window", Some(Some(w)), &mut policy.median_window);
    }
    policy.validate()?;
    let (seed, _) = resolve_seed(args.seed, cfg.as_ref())?;

    let input = File::open(&args.input).with_context(|| format!("cannot open input {}", args.input.display()))?;
    let tracks = parse_tracks(BufReader::new(input)).with_context(|| format!("in {}", args.input.display()))?;
    let prompts: BTreeMap<String, String> = match &args.prompts {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read prompts {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("prompts {} must be a JSON object of strings", p.display()))?
        }
        None => BTreeMap::new(),
    };
    let (_, manifest) = run_curation(&tracks, &prompts, &policy, seed)?;

    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut w = BufWriter::new(File::create(&args.output).with_context(|| format!("cannot create {}", args.output.display()))?);
    manifest.write_json(&mut w)?;
    w.flush().context("writing manifest")?;
    let s = &manifest.summary;
    println!(
        "accepted: {}  no_face: {}  multi_face: {}  low_variation: {}",
        s.accepted, s.no_face, s.multi_face, s.low_variation
    );
    Ok(())
}

/// Config, checkpoint and output directory shared by the analysis commands.
struct AnalyzeContext {
    cfg: RunConfig,
    seed: u64,
    source: SeedSource,
    params: Option<AlignerParams>,
    out: PathBuf,
    overrides: Overrides,
    config_path: PathBuf,
}

impl AnalyzeContext {
    fn new(common: CommonAnalyze) -> anyhow::Result<Self> {
        let mut cfg = RunConfig::load(&common.config)?;
        let mut overrides = Overrides::default();
        overrides.apply("output_dir", common.output_dir, &mut cfg.output_dir);
        let (seed, source) = resolve_seed(common.seed, Some(&cfg))?;
        cfg.train.seed = seed;
        cfg.validate()?;
        let params = match &common.checkpoint {
            Some(path) => {
                let (ck_cfg, params) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                check_dims(&ck_cfg, &cfg.train.aligner())?;
                Some(params)
            }
            None => None,
        };
        create_dir(&cfg.output_dir)?;
        Ok(Self { out: cfg.output_dir.clone(), cfg, seed, source, params, overrides, config_path: common.config })
    }

    fn params(&self) -> anyhow::Result<&AlignerParams> {
        self.params.as_ref().ok_or_else(|| anyhow!("--checkpoint is required for this analysis"))
    }

    fn finish<R: Serialize>(&self, command: &str, results: R) -> anyhow::Result<()> {
        let meta = RunMeta {
            command,
            config_path: Some(&self.config_path),
            seed: self.seed,
            seed_source: self.source,
            overrides: &self.overrides.0,
            config: &self.cfg,
            results,
        };
        write_json(&self.out.join(format!("{}_meta.json", command.replace(' ', "_"))), &meta)
    }
}

fn check_dims(ck: &AlignerConfig, cfg: &AlignerConfig) -> anyhow::Result<()> {
    let dims = [("L", ck.tokens, cfg.tokens), ("F", ck.features, cfg.features), ("D", ck.dim, cfg.dim), ("C", ck.atoms, cfg.atoms)];
    for (name, a, b) in dims {
        if a != b {
            return Err(anyhow!("checkpoint/config mismatch: checkpoint has {name} = {a} but the config has {name} = {b}"));
        }
    }
    if ck.pooling != cfg.pooling {
        return Err(anyhow!("checkpoint/config mismatch: checkpoint pooling is {} but the config has {}", ck.pooling, cfg.pooling));
    }
    if ck.euler_enabled != cfg.euler_enabled {
        return Err(anyhow!(
            "checkpoint/config mismatch: checkpoint euler_enabled = {} but the config has {}",
            ck.euler_enabled,
            cfg.euler_enabled
        ));
    }
    Ok(())
}

fn csv_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

pub fn analyze(what: Analysis) -> CmdResult {
    match what {
        Analysis::Activations { common, k } => {
            let mut ctx = AnalyzeContext::new(common)?;
            ctx.overrides.apply("analysis.k", k, &mut ctx.cfg.analysis.k);
            let a = &ctx.cfg.analysis;
            let world = build_world(&ctx.cfg.train, &ctx.cfg.world)?;
            let grid = world.eval_grid(a.activation_identities, a.activation_poses, 1)?;
            let (weights, _) = face_reps(ctx.params()?, &ctx.cfg.train.aligner(), grid.iter().map(|(_, f)| f))?;
            let buckets: Vec<PoseBucket> = grid.iter().map(|(_, f)| PoseBucket::of(&f.euler)).collect();
            let stats = activation_stats(weights.view(), &buckets, a.k)?;
            let mut w = csv_file(&ctx.out.join("activation_stats.csv"))?;
            stats.write_csv(&mut w).and_then(|_| w.flush()).context("writing activation_stats.csv")?;
            println!("within-bucket jaccard: {:.6}", stats.within_jaccard);
            println!("cross-bucket jaccard: {:.6}", stats.cross_jaccard);
            #[derive(Serialize)]
            struct R {
                within_jaccard: f64,
                cross_jaccard: f64,
            }
            ctx.finish("analyze activations", R { within_jaccard: stats.within_jaccard, cross_jaccard: stats.cross_jaccard })?;
        }
        Analysis::Project { common, identities, poses } => {
            let mut ctx = AnalyzeContext::new(common)?;
            ctx.overrides.apply("analysis.projection_identities", identities, &mut ctx.cfg.analysis.projection_identities);
            ctx.overrides.apply("analysis.projection_poses", poses, &mut ctx.cfg.analysis.projection_poses);
            let a = &ctx.cfg.analysis;
            let world = build_world(&ctx.cfg.train, &ctx.cfg.world)?;
            let grid = world.eval_grid(a.projection_identities, a.projection_poses, 2)?;
            let params = ctx.params()?;
            let ids: Vec<u64> = grid.iter().map(|(id, _)| *id).collect();
            let buckets: Vec<PoseBucket> = grid.iter().map(|(_, f)| PoseBucket::of(&f.euler)).collect();
            let (_, reps) = face_reps(params, &ctx.cfg.train.aligner(), grid.iter().map(|(_, f)| f))?;
            let coords = project_2d(reps.view())?;
            let ratio = separation_ratio(coords.view(), &ids)?;
            let baseline = tokenizer_mean_reps(params, grid.iter().map(|(_, f)| f))?;
            let baseline_ratio = separation_ratio(project_2d(baseline.view())?.view(), &ids)?;
            let mut w = csv_file(&ctx.out.join("projection.csv"))?;
            write_projection_csv(&mut w, &ids, &buckets, coords.view()).and_then(|_| w.flush()).context("writing projection.csv")?;
            println!("separation ratio: {ratio:.6}");
            println!("baseline separation ratio (tokenizer mean): {baseline_ratio:.6}");
            #[derive(Serialize)]
            struct R {
                separation_ratio: f64,
                baseline_separation_ratio: f64,
            }
            ctx.finish("analyze project", R { separation_ratio: ratio, baseline_separation_ratio: baseline_ratio })?;
        }
        Analysis::Perturb { common, ranges } => {
            let mut ctx = AnalyzeContext::new(common)?;
            ctx.overrides.apply("analysis.perturb_ranges", ranges, &mut ctx.cfg.analysis.perturb_ranges);
            let world = build_world(&ctx.cfg.train, &ctx.cfg.world)?;
            let eval = world.eval_pairs(ctx.cfg.train.eval_identities.max(2), 0)?;
            let rows = perturbation_sweep(ctx.params()?, &ctx.cfg.train.aligner(), &eval, &ctx.cfg.analysis.perturb_ranges, ctx.seed)?;
            let mut w = csv_file(&ctx.out.join("perturbation.csv"))?;
            write_perturbation_csv(&mut w, &rows).and_then(|_| w.flush()).context("writing perturbation.csv")?;
            for r in &rows {
                println!("range {:>5}: drift {:.6}  retrieval {:.4}", r.range, r.mean_drift, r.retrieval_accuracy);
            }
            ctx.finish("analyze perturb", &rows)?;
        }
        Analysis::Ablate { common, pooling, atoms, euler, seeds, perturb_range } => {
            let mut ctx = AnalyzeContext::new(common)?;
            let axes = &mut ctx.cfg.analysis.ablation;
            ctx.overrides.apply("analysis.ablation.pooling", pooling, &mut axes.pooling);
            ctx.overrides.apply("analysis.ablation.num_atoms", atoms, &mut axes.num_atoms);
            ctx.overrides.apply("analysis.ablation.euler", euler, &mut axes.euler);
            ctx.overrides.apply("analysis.ablation.seeds", seeds, &mut axes.seeds);
            ctx.overrides.apply("analysis.ablation.perturb_range", perturb_range, &mut axes.perturb_range);
            let rows = ablation_grid(&ctx.cfg.train, &ctx.cfg.world, &ctx.cfg.analysis.ablation, |c| {
                info!("finished pooling={} C={} euler={} seed={}", c.pooling, c.atoms, c.euler_enabled, c.seed)
            })?;
            let mut w = csv_file(&ctx.out.join("ablation.csv"))?;
            write_ablation_csv(&mut w, &rows).and_then(|_| w.flush()).context("writing ablation.csv")?;
            for r in &rows {
                println!(
                    "pooling={} C={} euler={}: loss {:.6}  retrieval {:.4}  drift {:.6}",
                    r.pooling, r.num_atoms, r.euler, r.final_loss, r.retrieval_accuracy, r.mean_drift
                );
            }
            ctx.finish("analyze ablate", &rows)?;
        }
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    if args.samples == 0 {
        return Err(Failure::Usage(anyhow!("--samples must be at least 1")));
    }
    let (seed, _) = resolve_seed(args.seed, None)?;
    let poolings = args.pooling.map_or(Pooling::ALL.to_vec(), |p| vec![p]);
    let eulers = args.euler.map_or(vec![true, false], |e| vec![e]);
    let mut worst: Option<(f64, String)> = None;
    for &pooling in &poolings {
        for &euler_enabled in &eulers {
            let cfg = GradCheckConfig {
                aligner: AlignerConfig {
                    tokens: args.tokens,
                    features: args.features,
                    dim: args.dim,
                    atoms: args.atoms,
                    pooling,
                    euler_enabled,
                },
                n_pairs: args.pairs,
                samples: args.samples,
                step: args.step,
                seed,
                frozen: Vec::new(),
                corrupt: args.corrupt,
            };
            let report = grad_check(&cfg)?;
            let euler = if euler_enabled { "on" } else { "off" };
            println!("pooling={pooling} euler={euler} max_rel_error={:e}", report.max_rel_error);
            if let Some(t) = report.worst_tensor() {
                let location = match t.worst {
                    Some((i, a, n)) => format!("{}[{i}] analytic={a:e} numeric={n:e}", t.tensor),
                    None => t.tensor.to_string(),
                };
                let label = format!("pooling={pooling} euler={euler} at {location}");
                if worst.as_ref().is_none_or(|(e, _)| t.max_rel_error > *e) {
                    worst = Some((t.max_rel_error, label));
                }
            }
        }
    }
    let (err, label) = worst.unwrap_or((0.0, "no coordinates".into()));
    println!("max relative error: {err:e}");
    if err < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed: relative error {err:e} >= {GRADCHECK_TOLERANCE:e}; worst coordinate {label}"
        )))
    }
}
