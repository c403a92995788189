//! Command implementations. Each reads its inputs, runs one library call
//! chain and writes artifacts under `--out`.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use sherrylab::config::{ConfigError, RunConfig};
use sherrylab::datamodel::{
    prepare_from_layout, write_manifest, write_toy_images, DataError, ManifestTemplate, Split, SplitManifest,
};
use sherrylab::plot::{
    heatmap_csv, heatmap_svg, plot_adapter_scaling, plot_heatmap, plot_tsne, scaling_csv, scaling_svg, tsne_csv, tsne_svg,
    PlotError,
};
use sherrylab::retrieval::{evaluate_manifest, extract_index, retrieve_image, zs_sbsr_evaluate, EvalOptions, RetrievalError};
use sherrylab::textbank::{
    embed_classes, ImportedProvider, PromptMode, PromptTemplate, StubProvider, TextBank, TextError, TextProvider,
};
use sherrylab::trainer::{init_teacher_student, BankRef, InitSource, TrainError};
use sherrylab::tsne::TsneConfig;
use sherrylab::{evaluate, generate_toy_dataset, load_manifest, train, Checkpoint, Domain, FeatureIndex, ToySpec};
use sherrylab_serve::{ServeError, ServiceState};
use thiserror::Error;

use crate::{
    Cli, Command, DomainArg, EmbedArgs, EvalArgs, ExtractArgs, PlotArgs, PlotKind, PrepareArgs, RetrieveArgs, SbsrArgs,
    ServeArgs, SplitArg, TrainArgs,
};

pub const CACHE_ENV: &str = "SHERRYLAB_CACHE";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Error variants that only wrap another module's error.
const WRAPPERS: [&str; 12] =
    ["Adapter", "Backbone", "Loss", "Data", "Text", "Archive", "Retrieval", "Image", "Train", "Plot", "Serve", "Gallery"];

impl CliError {
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            CliError::Usage(_) | CliError::Config(ConfigError::BadOverride(_) | ConfigError::UnknownKey(_))
        )
    }

    /// Name of the innermost error variant, e.g. `MissingFile`.
    pub fn kind(&self) -> String {
        let debug = format!("{self:?}");
        let mut rest = debug.as_str();
        loop {
            let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
            let ident = &rest[..end];
            let wraps = rest[end..].starts_with('(') && (WRAPPERS.contains(&ident) || rest.starts_with("Config("));
            if !wraps {
                return ident.to_string();
            }
            rest = &rest[end + 1..];
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| usage("--out is required for this command"))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v).expect("serializable") + "\n")?;
    Ok(())
}

/// Prints the JSON document and, with `--out`, also writes it to `file`.
fn emit(cli: &Cli, file: &str, v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
    if let Some(dir) = &cli.out {
        write_json(&dir.join(file), v)?;
    }
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { ks: cfg.eval.ks.clone(), ap_denominator: cfg.eval.ap_denominator }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(a) => prepare(cli, a),
        Command::EmbedText(a) => embed_text(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Sbsr(a) => sbsr(cli, a),
        Command::Retrieve(a) => retrieve(cli, a),
        Command::Plot(a) => plot(cli, a),
        Command::Extract(a) => extract(cli, a),
        Command::Serve(a) => serve(a),
    }
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("--images expects HxW, got '{s}'"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn prepare(cli: &Cli, a: &PrepareArgs) -> Result<()> {
    let out = out_dir(cli)?;
    if a.toy {
        let spec = ToySpec {
            num_seen: a.num_seen,
            num_unseen: a.num_unseen,
            per_class_per_domain: a.per_class,
            feature_dim: a.feature_dim,
            domain_offset_scale: a.domain_offset,
            noise_scale: a.noise,
            seed: cli.seed.unwrap_or(0),
        };
        let toy = generate_toy_dataset(&spec)?;
        let manifest = match &a.images {
            Some(hw) => write_toy_images(&toy, out, parse_hw(hw)?)?,
            None => toy.manifest.clone(),
        };
        let path = write_manifest(&manifest, out)?;
        let names: Vec<String> = toy.prototypes.iter().map(|(n, _)| n.clone()).collect();
        let rows: Vec<f64> = toy.prototypes.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let m = Array2::from_shape_vec((names.len(), spec.feature_dim), rows).expect("one row per prototype");
        let bank = TextBank::from_vectors("toy", &names, m.view())?;
        bank.save(&out.join("toy_bank.json"))?;
        println!("{}", json!({"manifest": path, "bank": out.join("toy_bank.json")}));
        return Ok(());
    }
    let (Some(name), Some(root)) = (&a.template, &a.root) else {
        return Err(usage("prepare needs --toy or --template with --root"));
    };
    let template = match ManifestTemplate::builtin(name) {
        Some(t) => t,
        None => ManifestTemplate::load(Path::new(name))?,
    };
    let m = prepare_from_layout(&template, root)?;
    let path = write_manifest(&m, out)?;
    println!("{}", json!({"manifest": path, "seen": m.seen_classes.len(), "unseen": m.unseen_classes.len()}));
    Ok(())
}

fn parse_prompt_mode(s: &str) -> Result<PromptMode> {
    serde_json::from_value(json!(s.to_ascii_uppercase().replace('-', "_")))
        .map_err(|_| usage(format!("unknown prompt mode '{s}'")))
}

fn embed_text(cli: &Cli, a: &EmbedArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli)?;
    let provider_kind = a.provider.clone().unwrap_or(cfg.text.provider.clone());
    let encoder = a.encoder.clone().unwrap_or(cfg.text.encoder.clone());
    let provider: Box<dyn TextProvider> = match provider_kind.as_str() {
        "stub" => Box::new(StubProvider::for_encoder(&encoder)?),
        "import" => {
            let path = a
                .import_path
                .clone()
                .or(cfg.text.import_path.clone().map(PathBuf::from))
                .ok_or_else(|| usage("the import provider needs --import PATH"))?;
            Box::new(ImportedProvider::load(&path)?)
        }
        other => return Err(TextError::UnknownProvider(other.into()).into()),
    };

    let (templates, mode) = if a.templates.is_empty() {
        let mode = match &a.prompt_mode {
            Some(s) => parse_prompt_mode(s)?,
            None => cfg.train.prompt_mode,
        };
        if mode == PromptMode::Classical {
            return Err(usage("the CLASSICAL prompt mode uses no text bank"));
        }
        (mode.templates(), mode.embed_mode())
    } else {
        let t = a.templates.iter().map(|p| PromptTemplate::new(p)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mode = if t.len() == 1 { PromptMode::APhotoOfClass.embed_mode() } else { PromptMode::Ensemble.embed_mode() };
        (t, mode)
    };

    let classes = match (&a.manifest, a.classes.is_empty()) {
        (Some(m), _) => load_manifest(m)?.all_classes(),
        (None, false) => a.classes.clone(),
        (None, true) => return Err(usage("embed-text needs --manifest or --classes")),
    };

    let key = {
        let mut h = Sha256::new();
        let doc = json!({
            "provider": provider_kind,
            "encoder": provider.name(),
            "dim": provider.dim(),
            "templates": templates.iter().map(|t| t.pattern()).collect::<Vec<_>>(),
            "mode": to_value(&mode),
            "classes": classes,
            "import": a.import_path,
        });
        h.update(doc.to_string().as_bytes());
        hex::encode(h.finalize())
    };
    let cached = std::env::var_os(CACHE_ENV).map(|d| PathBuf::from(d).join(format!("text-{key}.json")));
    let bank = match cached.as_ref().filter(|p| p.exists()) {
        Some(p) => TextBank::load(p)?,
        None => {
            let bank = embed_classes(provider.as_ref(), &templates, &classes, mode)?;
            if let Some(p) = &cached {
                bank.save(p)?;
            }
            bank
        }
    };
    let path = out.join("text_bank.json");
    bank.save(&path)?;
    println!("{}", json!({"bank": path, "classes": bank.classes.len(), "dim": bank.dim}));
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let out = out_dir(cli)?;
    let manifest = load_manifest(&a.manifest)?;
    let bank = TextBank::load(&a.bank)?;
    let pretrained = cfg.model.pretrained.as_ref().map(PathBuf::from);
    let source = match &pretrained {
        Some(p) => InitSource::Archive(p),
        None => InitSource::Toy { spec: &cfg.model.encoder, seed: cfg.model.init_seed },
    };
    let (_, init) = init_teacher_student(source)?;
    let mut ckpt = train(&cfg.train, &init, &manifest, &bank)?;
    ckpt.bank_ref = Some(BankRef { path: Some(a.bank.display().to_string()), ..BankRef::of(&bank) });
    let report = evaluate_manifest(&ckpt.encoder, &manifest, &eval_options(&cfg))?;
    ckpt.metrics = Some(json!({"unseen": report}));
    ckpt.save(out)?;
    fs::write(out.join("run_config.json"), cfg.to_json())?;
    let last = ckpt.run_log.last().expect("at least one epoch");
    println!(
        "{}",
        json!({"checkpoint": out, "epochs": ckpt.run_log.len(), "L_total": last.l_total, "map_all": report.map_all})
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let opts = eval_options(&cfg);
    let report = match (&a.checkpoint, &a.manifest, &a.queries, &a.gallery) {
        (Some(c), Some(m), None, None) => evaluate_manifest(&Checkpoint::load(c)?.encoder, &load_manifest(m)?, &opts)?,
        (None, _, Some(q), Some(g)) => evaluate(&FeatureIndex::load(q)?, &FeatureIndex::load(g)?, &opts)?,
        _ => return Err(usage("eval needs --checkpoint with --manifest, or --queries with --gallery")),
    };
    emit(cli, "metrics.json", &to_value(&report))
}

fn sbsr(cli: &Cli, a: &SbsrArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let student = Checkpoint::load(&a.checkpoint)?.encoder;
    let manifest = load_manifest(&a.manifest)?;
    let sketches = extract_index(&student, &manifest.test_by_domain(Domain::Sketch))?;
    let seed = cli.seed.unwrap_or(cfg.eval.sbsr_seed);
    let report = zs_sbsr_evaluate(&sketches, cfg.eval.sbsr_queries_per_class, seed, &eval_options(&cfg))?;
    emit(cli, "sbsr_metrics.json", &to_value(&report))
}

fn retrieve(cli: &Cli, a: &RetrieveArgs) -> Result<()> {
    let student = Checkpoint::load(&a.checkpoint)?.encoder;
    let gallery = FeatureIndex::load(&a.gallery)?;
    let bytes = fs::read(&a.query).map_err(|_| DataError::MissingFile(a.query.clone()))?;
    let hits = retrieve_image(&student, &gallery, &bytes, a.k)?;
    emit(cli, "retrieval.json", &json!({"query": a.query, "k": a.k, "results": hits}))
}

fn extract(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let out = out_dir(cli)?;
    let student = Checkpoint::load(&a.checkpoint)?.encoder;
    let manifest = load_manifest(&a.manifest)?;
    let domain = match a.domain {
        DomainArg::Sketch => Domain::Sketch,
        DomainArg::Photo => Domain::Photo,
    };
    let pool = match a.split {
        SplitArg::Train => &manifest.train_samples,
        SplitArg::Test => &manifest.test_samples,
    };
    let samples: Vec<_> = pool.iter().filter(|s| s.domain == domain).collect();
    let index = extract_index(&student, &samples)?;
    index.save(out)?;
    let split = if a.split == SplitArg::Train { Split::Train } else { Split::Test };
    println!("{}", json!({"features": out, "count": index.len(), "dim": index.dim(), "domain": domain, "split": split}));
    Ok(())
}

/// Largest per-class sample count available in every unseen class and domain.
fn available_per_class(m: &SplitManifest) -> usize {
    m.unseen_classes
        .iter()
        .flat_map(|c| {
            [Domain::Sketch, Domain::Photo]
                .map(|d| m.test_samples.iter().filter(|s| &s.class_name == c && s.domain == d).count())
        })
        .min()
        .unwrap_or(0)
}

fn plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli)?;
    fs::create_dir_all(out)?;
    let manifest = load_manifest(&a.manifest)?;
    let seed = cli.seed.unwrap_or(0);
    let num_classes = a.num_classes.unwrap_or(manifest.unseen_classes.len().min(10));
    let checkpoint = || -> Result<Checkpoint> {
        let p = a.checkpoint.as_ref().ok_or_else(|| usage("this plot needs --checkpoint"))?;
        Ok(Checkpoint::load(p)?)
    };
    let bank = || -> Result<TextBank> {
        let p = a.bank.as_ref().ok_or_else(|| usage("this plot needs --bank"))?;
        Ok(TextBank::load(p)?)
    };
    match a.kind {
        PlotKind::Tsne => {
            let per_class = a.per_class.unwrap_or(available_per_class(&manifest).min(100));
            let tsne = TsneConfig { seed, ..Default::default() };
            let points = plot_tsne(&checkpoint()?.encoder, &manifest, num_classes, per_class, &tsne)?;
            fs::write(out.join("tsne.csv"), tsne_csv(&points))?;
            fs::write(out.join("tsne.svg"), tsne_svg(&points))?;
            println!("{}", json!({"points": points.len(), "csv": out.join("tsne.csv"), "image": out.join("tsne.svg")}));
        }
        PlotKind::Heatmap => {
            let per_class = a.per_class.unwrap_or(available_per_class(&manifest).min(10));
            let h = plot_heatmap(&checkpoint()?.encoder, &manifest, &bank()?, num_classes, per_class, seed)?;
            fs::write(out.join("heatmap.csv"), heatmap_csv(&h))?;
            fs::write(out.join("heatmap.svg"), heatmap_svg(&h))?;
            println!(
                "{}",
                json!({"rows": h.classes.len(), "columns": h.columns.len(), "csv": out.join("heatmap.csv"), "image": out.join("heatmap.svg")})
            );
        }
        PlotKind::Scaling => {
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            let (_, init) = init_teacher_student(InitSource::Toy { spec: &cfg.model.encoder, seed: cfg.model.init_seed })?;
            let counts = if a.counts.is_empty() {
                let n = init.insertion_points().len();
                let mut c = vec![0, n / 2, n];
                c.dedup();
                c
            } else {
                a.counts.clone()
            };
            let points = plot_adapter_scaling(&counts, &train_cfg, &init, &manifest, &bank()?, &eval_options(&cfg))?;
            fs::write(out.join("scaling.csv"), scaling_csv(&points))?;
            fs::write(out.join("scaling.svg"), scaling_svg(&points))?;
            println!("{}", json!({"points": points, "csv": out.join("scaling.csv"), "image": out.join("scaling.svg")}));
        }
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| usage(format!("bad listen address {}:{}", a.host, a.port)))?;
    let state = ServiceState::load(&a.checkpoint, &a.gallery, a.manifest.as_deref())?;
    eprintln!("{}", json!({"listening": format!("http://{addr}"), "gallery_size": state.gallery.len()}));
    sherrylab_serve::run(state, addr)?;
    Ok(())
}
