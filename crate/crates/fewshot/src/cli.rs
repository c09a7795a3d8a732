//! Command-line experiment runner: gen-data, train, eval, stylize, cluster,
//! and report subcommands over the key-value config format.
//!
//! Every experiment directory receives the fully resolved config next to its
//! results, and identical configs + seeds reproduce identical result records
//! (wall time aside). Exit codes: 0 success, 2 config error, 3 runtime
//! failure. Partial outputs are removed when a command fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::{AttentionConfig, AttentionMode};
use crate::config::{ConfigError, KvConfig};
use crate::contrastive::{
    alternating_train, dbscan, embed_features, eps_by_percentile, rounds_to_csv, AlternatingConfig,
};
use crate::cross_domain::{stylize_dataset, train_stylized, StylizationJob, StylizeSpace};
use crate::data::{
    generate_synthetic, load_dataset, save_dataset, DomainStyle, GeneratorConfig, Role,
    SampleFilter, Split,
};
use crate::protonet::{
    episodic_train, evaluate, pretrain_classifier, EmbedderConfig, EvalProtocol, MethodConfig,
    Metric, MetricConfig, PretrainConfig, ProtoModel, StyleMixPlan, TrainConfig,
};
use crate::rng::stream;
use crate::stylemix::{MixConfig, PartnerScope};

pub const EXIT_CONFIG_ERROR: i32 = 2;
pub const EXIT_RUNTIME_ERROR: i32 = 3;

/// One row of a results table (the CSV the eval and report commands emit).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub method: String,
    pub target_domain: String,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub wall_time_s: f64,
    pub config_hash: u64,
}

pub const RESULT_HEADER: &str =
    "method,target_domain,mean_accuracy,ci95,n_episodes,wall_time_s,config_hash";

impl ResultRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{:.3},{:016x}",
            self.method,
            self.target_domain,
            self.mean_accuracy,
            self.ci95,
            self.n_episodes,
            self.wall_time_s,
            self.config_hash
        )
    }

    pub fn parse_csv_row(row: &str) -> Option<ResultRecord> {
        let parts: Vec<&str> = row.trim().split(',').collect();
        if parts.len() != 7 {
            return None;
        }
        Some(ResultRecord {
            method: parts[0].to_string(),
            target_domain: parts[1].to_string(),
            mean_accuracy: parts[2].parse().ok()?,
            ci95: parts[3].parse().ok()?,
            n_episodes: parts[4].parse().ok()?,
            wall_time_s: parts[5].parse().ok()?,
            config_hash: u64::from_str_radix(parts[6], 16).ok()?,
        })
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::tensor::TensorError> for CliError {
    fn from(e: crate::tensor::TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::data::DataError> for CliError {
    fn from(e: crate::data::DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Entry point used by the `fsl` binary; returns the process exit code.
pub fn main_with_args(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            EXIT_CONFIG_ERROR
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME_ERROR
        }
    }
}

fn dispatch(args: &[String]) -> CliResult<()> {
    let Some(command) = args.first() else {
        return Err(CliError::Config(usage()));
    };
    let parsed = ParsedArgs::parse(&args[1..])?;
    match command.as_str() {
        "gen-data" => cmd_gen_data(parsed),
        "train" => cmd_train(parsed),
        "eval" => cmd_eval(parsed),
        "stylize" => cmd_stylize(parsed),
        "cluster" => cmd_cluster(parsed),
        "report" => cmd_report(parsed),
        other => Err(CliError::Config(format!(
            "unknown subcommand `{other}`\n{}",
            usage()
        ))),
    }
}

fn usage() -> String {
    "usage: fsl <subcommand> [flags]\n\
     subcommands:\n\
       gen-data  --out FILE [--config FILE] [--set k=v]...\n\
       train     --method M --data FILE --out DIR [--config FILE] [--set k=v]...\n\
       eval      --model FILE --data FILE --out DIR [--config FILE] [--set k=v]...\n\
       stylize   --coefficient C --seed S --in FILE --style-set FILE --out FILE\n\
       cluster   --eps-percentile P --min-pts N --model FILE --data FILE [--out DIR]\n\
       report    --runs DIR[,DIR...] --out FILE"
        .to_string()
}

struct ParsedArgs {
    flags: BTreeMap<String, Vec<String>>,
}

impl ParsedArgs {
    fn parse(args: &[String]) -> CliResult<Self> {
        let mut flags: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let Some(name) = arg.strip_prefix("--") else {
                return Err(CliError::Config(format!("unexpected argument `{arg}`")));
            };
            let Some(value) = args.get(i + 1) else {
                return Err(CliError::Config(format!("flag --{name} needs a value")));
            };
            flags.entry(name.to_string()).or_default().push(value.clone());
            i += 2;
        }
        Ok(ParsedArgs { flags })
    }

    fn one(&self, name: &str) -> CliResult<&str> {
        match self.flags.get(name).map(|v| v.as_slice()) {
            Some([value]) => Ok(value),
            Some(_) => Err(CliError::Config(format!("flag --{name} given twice"))),
            None => Err(CliError::Config(format!("missing required flag --{name}"))),
        }
    }

    fn opt(&self, name: &str) -> CliResult<Option<&str>> {
        match self.flags.get(name).map(|v| v.as_slice()) {
            Some([value]) => Ok(Some(value)),
            Some(_) => Err(CliError::Config(format!("flag --{name} given twice"))),
            None => Ok(None),
        }
    }

    fn all(&self, name: &str) -> Vec<String> {
        self.flags.get(name).cloned().unwrap_or_default()
    }

    fn known(&self, names: &[&str]) -> CliResult<()> {
        for k in self.flags.keys() {
            if !names.contains(&k.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown flag --{k} (expected one of: {})",
                    names.join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Load --config (if any) then apply --set overrides.
fn resolve_config(args: &ParsedArgs) -> CliResult<KvConfig> {
    let mut config = match args.opt("config")? {
        Some(path) => KvConfig::from_file(Path::new(path))?,
        None => KvConfig::default(),
    };
    config.apply_overrides(&args.all("set"))?;
    Ok(config)
}

/// Deletes the listed artifacts if the body fails.
fn with_cleanup<T>(paths: &[PathBuf], body: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let out = body();
    if out.is_err() {
        for p in paths {
            let _ = std::fs::remove_file(p);
        }
    }
    out
}

// ── gen-data ─────────────────────────────────────────────────────────

fn generator_from_config(config: &KvConfig) -> CliResult<GeneratorConfig> {
    let defaults = GeneratorConfig::default();
    let n_classes = config.get_usize("data.classes", defaults.n_classes)?;
    let base = config.get_usize("data.base-classes", (n_classes * 8).div_euclid(16))?;
    let val = config.get_usize("data.val-classes", (n_classes * 3).div_euclid(16))?;
    let novel = config.get_usize(
        "data.novel-classes",
        n_classes.saturating_sub(base + val),
    )?;
    let mut target = defaults.domains[1].clone();
    target.channel_shift = [
        config.get_f64("data.target.shift.r", target.channel_shift[0])?,
        config.get_f64("data.target.shift.g", target.channel_shift[1])?,
        config.get_f64("data.target.shift.b", target.channel_shift[2])?,
    ];
    target.channel_scale = [
        config.get_f64("data.target.scale.r", target.channel_scale[0])?,
        config.get_f64("data.target.scale.g", target.channel_scale[1])?,
        config.get_f64("data.target.scale.b", target.channel_scale[2])?,
    ];
    target.noise_amplitude = config.get_f64("data.target.noise-amp", target.noise_amplitude)?;
    target.noise_frequency = config.get_f64("data.target.noise-freq", target.noise_frequency)?;
    Ok(GeneratorConfig {
        n_classes,
        samples_per_class: config.get_usize("data.samples-per-class", defaults.samples_per_class)?,
        height: config.get_usize("data.height", defaults.height)?,
        width: config.get_usize("data.width", defaults.width)?,
        domains: vec![DomainStyle::neutral(), target],
        domain_gap: config.get_f64("data.gap", defaults.domain_gap)?,
        seed: config.require_u64("data.seed")?,
        base_classes: base,
        val_classes: val,
        novel_classes: novel,
    })
}

fn cmd_gen_data(args: ParsedArgs) -> CliResult<()> {
    args.known(&["out", "config", "set"])?;
    let out = PathBuf::from(args.one("out")?);
    let config = resolve_config(&args)?;
    config.validate_keys(&["data"])?;
    let generator = generator_from_config(&config)?;
    let manifest = generate_synthetic(&generator)?;
    with_cleanup(std::slice::from_ref(&out), || {
        save_dataset(&manifest, &out)?;
        Ok(())
    })?;
    println!(
        "wrote {} samples ({} classes x {} domains) to {}",
        manifest.samples.len(),
        manifest.n_classes(),
        manifest.n_domains(),
        out.display()
    );
    Ok(())
}

// ── shared train/eval config plumbing ────────────────────────────────

const METHOD_KEYS: &[&str] = &[
    "method",
    "seeds",
    "train",
    "pretrain",
    "embedder",
    "metric",
    "stylemix",
    "attention",
    "stylize",
    "contrastive",
    "eval",
];

fn embedder_from_config(config: &KvConfig) -> CliResult<EmbedderConfig> {
    Ok(EmbedderConfig {
        instance_norm: config.get_bool("embedder.norm", true)?,
        ..Default::default()
    })
}

fn method_from_config(config: &KvConfig) -> CliResult<MethodConfig> {
    let metric = match config.get("metric") {
        None => Metric::SquaredL2,
        Some(name) => Metric::parse(name).ok_or_else(|| {
            CliError::Config(format!("metric `{name}` is not one of: sq_l2, cosine"))
        })?,
    };
    let stylemix = if config.get_bool("stylemix.enabled", false)?
        || config.get("stylemix.slots").is_some()
    {
        let scope = match config.get("stylemix.scope").unwrap_or("within-episode") {
            "within-episode" => PartnerScope::WithinEpisode,
            "cross-episode" => PartnerScope::CrossEpisode,
            other => {
                return Err(CliError::Config(format!(
                    "stylemix.scope `{other}` is not one of: within-episode, cross-episode"
                )))
            }
        };
        Some(StyleMixPlan {
            mix: MixConfig {
                alpha: config.get_f64("stylemix.alpha", 0.3)?,
                p: config.get_f64("stylemix.p", 0.5)?,
                scope,
            },
            slots: config.get_usize_list("stylemix.slots", &[0])?,
        })
    } else {
        None
    };
    let attention = match config.get("attention.mode") {
        None => None,
        Some(name) => {
            let mode = AttentionMode::parse(name).ok_or_else(|| {
                CliError::Config(format!(
                    "attention.mode `{name}` is not one of: class_support, prototypes, \
                     query_prototype, combined"
                ))
            })?;
            Some(AttentionConfig {
                mode,
                slots: config.get_usize_list("attention.slots", &[])?,
                learned_projections: config.get_bool("attention.learned-projections", false)?,
            })
        }
    };
    Ok(MethodConfig {
        stylemix,
        attention,
        metric: MetricConfig(metric),
    })
}

fn train_config_from(config: &KvConfig) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        n_way: config.get_usize("train.way", d.n_way)?,
        k_shot: config.get_usize("train.shot", d.k_shot)?,
        q_queries: config.get_usize("train.queries", d.q_queries)?,
        episodes: config.get_usize("train.episodes", d.episodes)?,
        lr: config.get_f64("train.lr", d.lr)?,
        momentum: config.get_f64("train.momentum", d.momentum)?,
        lr_decay: config.get_f64("train.lr-decay", d.lr_decay)?,
        lr_decay_at: config.get_f64("train.lr-decay-at", d.lr_decay_at)?,
        double_episode: config.get_bool(
            "train.double-episode",
            config.get("stylemix.scope") == Some("cross-episode"),
        )?,
    })
}

fn pretrain_config_from(config: &KvConfig) -> CliResult<PretrainConfig> {
    let d = PretrainConfig::default();
    Ok(PretrainConfig {
        epochs: config.get_usize("pretrain.epochs", d.epochs)?,
        batch_size: config.get_usize("pretrain.batch-size", d.batch_size)?,
        lr: config.get_f64("pretrain.lr", d.lr)?,
        momentum: config.get_f64("pretrain.momentum", d.momentum)?,
        lr_decay: config.get_f64("pretrain.lr-decay", d.lr_decay)?,
        lr_decay_at: config.get_f64("pretrain.lr-decay-at", d.lr_decay_at)?,
    })
}

fn alternating_config_from(config: &KvConfig) -> CliResult<AlternatingConfig> {
    let d = AlternatingConfig::default();
    Ok(AlternatingConfig {
        rounds_cap: config.get_usize("contrastive.rounds-cap", d.rounds_cap)?,
        inner_iters: config.get_usize("contrastive.inner-iters", d.inner_iters)?,
        batch_size: config.get_usize("contrastive.batch-size", d.batch_size)?,
        lr: config.get_f64("contrastive.lr", d.lr)?,
        momentum: config.get_f64("contrastive.momentum", d.momentum)?,
        tau: config.get_f64("contrastive.tau", d.tau)?,
        min_pts: config.get_usize("contrastive.min-pts", d.min_pts)?,
        eps_percentile: config.get_f64("contrastive.eps-percentile", d.eps_percentile)?,
        convergence_tol: config.get_f64("contrastive.convergence-tol", d.convergence_tol)?,
        monitor_episodes: config.get_usize("contrastive.monitor-episodes", d.monitor_episodes)?,
        unlabeled_cap: match config.get("contrastive.unlabeled-cap") {
            None => None,
            Some(_) => Some(config.get_usize("contrastive.unlabeled-cap", 0)?),
        },
        memory_momentum: match config.get("contrastive.memory-momentum") {
            None => None,
            Some(_) => Some(config.get_f64("contrastive.memory-momentum", 0.0)?),
        },
        batch_outliers: config.get_bool("contrastive.batch-outliers", d.batch_outliers)?,
        lr_round_decay: config.get_f64("contrastive.lr-round-decay", d.lr_round_decay)?,
    })
}

fn split_from(config: &KvConfig, key: &str, default: Split) -> CliResult<Split> {
    match config.get(key) {
        None => Ok(default),
        Some(name) => Split::parse(name).ok_or_else(|| {
            CliError::Config(format!("{key} `{name}` is not one of: base, val, novel"))
        }),
    }
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(args: ParsedArgs) -> CliResult<()> {
    args.known(&["method", "data", "out", "config", "set"])?;
    let data_path = PathBuf::from(args.one("data")?);
    let out_dir = PathBuf::from(args.one("out")?);
    let mut config = resolve_config(&args)?;
    if let Some(method) = args.opt("method")? {
        config.set("method", method);
    }
    config.validate_keys(METHOD_KEYS)?;
    let method_name = config.require("method")?.to_string();
    let seed = config.require_u64("seeds.train")?;
    if !data_path.exists() {
        return Err(CliError::Config(format!(
            "dataset file {} does not exist",
            data_path.display()
        )));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;

    let manifest = load_dataset(&data_path)?;
    let embedder = embedder_from_config(&config)?;
    let method = method_from_config(&config)?;
    let train_cfg = train_config_from(&config)?;
    let pretrain_cfg = pretrain_config_from(&config)?;
    let base = SampleFilter {
        split: Some(Split::Base),
        domain: Some(0),
        role: Some(Role::LabeledSource),
    };

    let model_path = out_dir.join("model.fslt");
    let log_path = out_dir.join("train_log.csv");
    let config_path = out_dir.join("resolved.config");
    let rounds_path = out_dir.join("rounds.csv");
    let stylized_path = out_dir.join("stylized.fsld");
    let artifacts = vec![
        model_path.clone(),
        log_path.clone(),
        config_path.clone(),
        rounds_path.clone(),
        stylized_path.clone(),
    ];

    let started = Instant::now();
    with_cleanup(&artifacts, || {
        let mut model = ProtoModel::new(embedder.clone(), &mut stream(seed, "init", &[]))?;
        if method
            .attention
            .as_ref()
            .is_some_and(|a| a.learned_projections)
        {
            let (_, h, w) = manifest.image_shape();
            let d = embedder.feature_dim(h, w);
            model = model.with_learned_projections(d, &mut stream(seed, "proj-init", &[]))?;
        }

        let mut log = crate::protonet::TrainLog::default();
        match method_name.as_str() {
            "baseline" => {
                log = pretrain_classifier(&mut model, &manifest, base, &pretrain_cfg, seed)?;
            }
            "protonet" | "stylemix" | "attention" => {
                log = pretrain_classifier(&mut model, &manifest, base, &pretrain_cfg, seed)?;
                let episodic =
                    episodic_train(&mut model, &manifest, base, &method, &train_cfg, seed)?;
                log.rows.extend(episodic.rows);
            }
            "stylize" => {
                let job = StylizationJob {
                    coefficient: config.get_f64("stylize.coefficient", 1.0)?,
                    seed: config.require_u64("seeds.train")?,
                    space: match config.get("stylize.space").unwrap_or("pixel") {
                        "pixel" => StylizeSpace::Pixel,
                        "feature" => StylizeSpace::Feature,
                        other => {
                            return Err(CliError::Config(format!(
                                "stylize.space `{other}` is not one of: pixel, feature"
                            )))
                        }
                    },
                    copies: config.get_usize("stylize.copies", 1)?,
                    ..Default::default()
                };
                let stylized = stylize_dataset(&manifest, &job)?;
                save_dataset(&stylized, &stylized_path)?;
                log = train_stylized(
                    &mut model,
                    &manifest,
                    &stylized,
                    &method,
                    &pretrain_cfg,
                    &train_cfg,
                    seed,
                )?;
            }
            "contrastive" => {
                match config.get("contrastive.init-model") {
                    Some(path) => model = ProtoModel::load(Path::new(path))?,
                    None => {
                        log =
                            pretrain_classifier(&mut model, &manifest, base, &pretrain_cfg, seed)?;
                        let episodic = episodic_train(
                            &mut model, &manifest, base, &method, &train_cfg, seed,
                        )?;
                        log.rows.extend(episodic.rows);
                    }
                }
                let alt = alternating_config_from(&config)?;
                let rounds = alternating_train(&mut model, &manifest, &alt, seed, Some(&out_dir))?;
                std::fs::write(&rounds_path, rounds_to_csv(&rounds))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            other => {
                return Err(CliError::Config(format!(
                    "method `{other}` is not one of: baseline, protonet, stylemix, attention, \
                     stylize, contrastive"
                )))
            }
        }

        model.save(&model_path)?;
        std::fs::write(&log_path, log.to_csv()).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&config_path, config.canonical())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(())
    })?;
    println!(
        "trained method={method_name} in {:.1}s -> {}",
        started.elapsed().as_secs_f64(),
        model_path.display()
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn cmd_eval(args: ParsedArgs) -> CliResult<()> {
    args.known(&["model", "data", "out", "config", "set"])?;
    let model_path = PathBuf::from(args.one("model")?);
    let data_path = PathBuf::from(args.one("data")?);
    let out_dir = PathBuf::from(args.one("out")?);
    let config = resolve_config(&args)?;
    config.validate_keys(METHOD_KEYS)?;
    for (flag, path) in [("model", &model_path), ("data", &data_path)] {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "--{flag} file {} does not exist",
                path.display()
            )));
        }
    }
    let seed = config.require_u64("seeds.eval")?;
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;

    let manifest = load_dataset(&data_path)?;
    let model = ProtoModel::load(&model_path)?;
    let method = method_from_config(&config)?;
    let split = split_from(&config, "eval.split", Split::Novel)?;
    let domain = config.get_usize("eval.domain", 1)?;
    if domain >= manifest.n_domains() {
        return Err(CliError::Config(format!(
            "eval.domain {domain} out of range ({} domains)",
            manifest.n_domains()
        )));
    }
    let protocol = EvalProtocol {
        n_way: config.get_usize("eval.way", 5)?,
        k_shot: config.get_usize("eval.shot", 5)?,
        q_queries: config.get_usize("eval.queries", 15)?,
        n_episodes: config.get_usize("eval.episodes", 2000)?,
    };

    let results_path = out_dir.join("results.csv");
    let config_path = out_dir.join("resolved.config");
    let started = Instant::now();
    with_cleanup(&[results_path.clone(), config_path.clone()], || {
        let report = evaluate(
            &model,
            &manifest,
            SampleFilter::split_domain(split, domain),
            &method,
            &protocol,
            seed,
        )?;
        let record = ResultRecord {
            method: config.get("method").unwrap_or("eval").to_string(),
            target_domain: manifest.domain_names[domain].clone(),
            mean_accuracy: report.mean_accuracy,
            ci95: report.ci95,
            n_episodes: report.n_episodes,
            wall_time_s: started.elapsed().as_secs_f64(),
            config_hash: config.hash(),
        };
        std::fs::write(
            &results_path,
            format!("{RESULT_HEADER}\n{}\n", record.to_csv_row()),
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&config_path, config.canonical())
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!(
            "accuracy {:.4} ± {:.4} over {} episodes -> {}",
            record.mean_accuracy,
            record.ci95,
            record.n_episodes,
            results_path.display()
        );
        Ok(())
    })
}

// ── stylize ──────────────────────────────────────────────────────────

fn cmd_stylize(args: ParsedArgs) -> CliResult<()> {
    args.known(&["coefficient", "seed", "in", "style-set", "out", "config", "set"])?;
    let coefficient: f64 = args
        .one("coefficient")?
        .parse()
        .map_err(|_| CliError::Config("--coefficient must be a number in [0, 1]".into()))?;
    let seed: u64 = args
        .one("seed")?
        .parse()
        .map_err(|_| CliError::Config("--seed must be an integer".into()))?;
    let in_path = PathBuf::from(args.one("in")?);
    let style_path = PathBuf::from(args.one("style-set")?);
    let out = PathBuf::from(args.one("out")?);
    let config = resolve_config(&args)?;
    config.validate_keys(&["stylize"])?;

    let source = load_dataset(&in_path)?;
    let manifest = if style_path == in_path {
        source
    } else {
        // pull the style samples into the source's manifest under its tables
        let styles = load_dataset(&style_path)?;
        let mut merged = source.clone();
        for s in &styles.samples {
            let mut record = s.clone();
            record.role = Role::UnlabeledTarget;
            // classes/domains of foreign style images are irrelevant to the
            // pairing; clamp them into range
            record.class_id = record.class_id.min(merged.n_classes() - 1);
            record.domain_id = record.domain_id.min(merged.n_domains() - 1);
            merged.samples.push(record);
        }
        merged
    };
    let job = StylizationJob {
        coefficient,
        seed,
        space: match config.get("stylize.space").unwrap_or("pixel") {
            "pixel" => StylizeSpace::Pixel,
            "feature" => StylizeSpace::Feature,
            other => {
                return Err(CliError::Config(format!(
                    "stylize.space `{other}` is not one of: pixel, feature"
                )))
            }
        },
        copies: config.get_usize("stylize.copies", 1)?,
        ..Default::default()
    };
    let stylized = stylize_dataset(&manifest, &job)?;
    with_cleanup(std::slice::from_ref(&out), || {
        save_dataset(&stylized, &out)?;
        Ok(())
    })?;
    println!(
        "stylized {} images at coefficient {coefficient} -> {}",
        stylized.samples.len(),
        out.display()
    );
    Ok(())
}

// ── cluster ──────────────────────────────────────────────────────────

fn cmd_cluster(args: ParsedArgs) -> CliResult<()> {
    args.known(&["eps-percentile", "min-pts", "model", "data", "out", "config", "set"])?;
    let percentile: f64 = args
        .one("eps-percentile")?
        .parse()
        .map_err(|_| CliError::Config("--eps-percentile must be in [0, 1]".into()))?;
    let min_pts: usize = args
        .one("min-pts")?
        .parse()
        .map_err(|_| CliError::Config("--min-pts must be a positive integer".into()))?;
    let model = ProtoModel::load(Path::new(args.one("model")?))?;
    let manifest = load_dataset(Path::new(args.one("data")?))?;

    let unlabeled = manifest.select(SampleFilter::role(Role::UnlabeledTarget));
    if unlabeled.is_empty() {
        return Err(CliError::Runtime(
            "dataset has no unlabeled-target samples to cluster".into(),
        ));
    }
    let features = embed_features(&model, &manifest, &unlabeled)?;
    let eps = eps_by_percentile(&features, min_pts, percentile)?;
    let assignment = dbscan(&features, eps, min_pts)?;
    println!(
        "eps {eps:.4} (min_pts {min_pts}): {} clusters, {} outliers over {} samples",
        assignment.n_clusters,
        assignment.n_outliers(),
        unlabeled.len()
    );
    if let Some(dir) = args.opt("out")? {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mut csv = String::from("sample_index,cluster\n");
        for (&sample, label) in unlabeled.iter().zip(&assignment.labels) {
            match label {
                Some(c) => csv.push_str(&format!("{sample},{c}\n")),
                None => csv.push_str(&format!("{sample},outlier\n")),
            }
        }
        let path = dir.join("clusters.csv");
        std::fs::write(&path, csv).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ── report ───────────────────────────────────────────────────────────

fn cmd_report(args: ParsedArgs) -> CliResult<()> {
    args.known(&["runs", "out"])?;
    let out = PathBuf::from(args.one("out")?);
    let mut records = Vec::new();
    for dir in args.one("runs")?.split(',') {
        let path = Path::new(dir.trim()).join("results.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        for row in text.lines().skip(1) {
            if row.trim().is_empty() {
                continue;
            }
            let record = ResultRecord::parse_csv_row(row).ok_or_else(|| {
                CliError::Runtime(format!("malformed result row in {}: {row}", path.display()))
            })?;
            records.push(record);
        }
    }
    // best method last, like a results table
    records.sort_by(|a, b| {
        a.mean_accuracy
            .partial_cmp(&b.mean_accuracy)
            .expect("finite accuracies")
    });
    let mut csv = String::from(RESULT_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.to_csv_row());
        csv.push('\n');
    }
    with_cleanup(std::slice::from_ref(&out), || {
        std::fs::write(&out, &csv).map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(())
    })?;
    println!("aggregated {} runs -> {}", records.len(), out.display());
    Ok(())
}
