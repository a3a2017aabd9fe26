use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use promptground::harness::ablation::{run_layer_ablation, run_pq_grid, LayerStrategy};
use promptground::harness::analysis::{aggregate_selection_frequency, attention_strength_stats, read_trace_file};
use promptground::harness::dataset::Dataset;
use promptground::harness::noisy::run_noisy_knowledge;
use promptground::harness::run::{run_detect, BankSet, Corpus};
use promptground::harness::synth::{synth_dataset, write_synth, SynthSpec};
use promptground::prompt::client::{FixtureLlm, HttpClient, LlmClient, MockVqa, RetryPolicy, VqaClient};
use promptground::prompt::fixtures::fixture_categories;
use promptground::prompt::forge::{default_questions, forge_prompt_bank, mix_noise, CategoryRequest, ForgeOptions};
use promptground::prompt::{load_prompt_bank, save_prompt_bank, PromptBank, Source};
use promptground::{DetectionConfig, Error, ExecPolicy, Mode, ModelWeights};

#[derive(Parser)]
#[command(name = "promptground", version, about = "Attribute-prompted grounding detection on toy images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; environment and flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weights manifest; seeded from the config when absent.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["baseline", "structural"])]
    mode: Option<String>,
    #[arg(long, global = true)]
    top_p: Option<usize>,
    #[arg(long, global = true)]
    top_q: Option<usize>,
    /// Comma-separated 1-based layers, `all`, or `none`.
    #[arg(long, global = true)]
    fusion_layers: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `field=value` config overrides.
    #[arg(long = "set", global = true, value_name = "FIELD=VALUE")]
    overrides: Vec<String>,
    /// Run per-image work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded model weights.
    Weights {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a prompt bank document, optionally with encoded bank caches.
    BankBuild(BankBuildArgs),
    /// Run detection over a dataset and write predictions, traces and metrics.
    Detect {
        #[arg(long)]
        dataset: PathBuf,
        /// Prompt bank document or a directory of cached banks.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the P x Q grid.
    AblatePq {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20")]
        p_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,15,20")]
        q_values: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate fusion at single layers or layer suffixes.
    AblateLayers {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// `single_layer`, `suffix_range`, or `both`.
        #[arg(long, default_value = "both")]
        strategy: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a planted-signal dataset and its prompt bank.
    Synth(SynthArgs),
    /// Selection counts per layer and attribute kind.
    Freq {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image attention strength and its histogram.
    Attn {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a clean and a noisy bank on the same dataset.
    Noisy {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        noisy_bank: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BankBuildArgs {
    /// Categories to build; defaults to the dataset's, else the bundled tables.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<String>,
    /// Dataset whose annotated images receive instance questions.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also encode each category and write bank caches here.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Mix this category's attributes into every other category.
    #[arg(long)]
    noise_from: Option<String>,
    #[arg(long, default_value_t = 3)]
    noise_terms: usize,
    #[arg(long, env = "PROMPTGROUND_VQA_ENDPOINT")]
    vqa_endpoint: Option<String>,
    #[arg(long, env = "PROMPTGROUND_LLM_ENDPOINT")]
    llm_endpoint: Option<String>,
    #[arg(long, env = "PROMPTGROUND_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "polyp")]
    category: String,
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    terms_per_kind: usize,
    #[arg(long, default_value_t = 1)]
    objects: usize,
    #[arg(long, default_value_t = 0.2)]
    distractor_rate: f64,
    /// Dataset seed; defaults to the model seed.
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(c: &Common) -> anyhow::Result<DetectionConfig> {
    let mut cfg = match &c.config {
        Some(p) => DetectionConfig::load(p)?,
        None => DetectionConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    let mut set = |k: &str, v: String| cfg.set_field(k, &v);
    if let Some(m) = &c.mode {
        set("mode", m.clone())?;
    }
    if let Some(v) = c.top_p {
        set("top_p", v.to_string())?;
    }
    if let Some(v) = c.top_q {
        set("top_q", v.to_string())?;
    }
    if let Some(v) = &c.fusion_layers {
        set("fusion_layers", v.clone())?;
    }
    if let Some(v) = c.seed {
        set("seed", v.to_string())?;
    }
    for o in &c.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!(Error::Config(format!("override `{o}` is not FIELD=VALUE")));
        };
        set(k.trim(), v.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_weights(c: &Common, cfg: &DetectionConfig) -> anyhow::Result<ModelWeights> {
    Ok(match &c.weights {
        Some(p) => ModelWeights::load(p, cfg)?,
        None => ModelWeights::seeded(cfg)?,
    })
}

fn load_banks(path: &Path, corpus: &Corpus, weights: &ModelWeights, cfg: &DetectionConfig) -> anyhow::Result<BankSet> {
    let cats = corpus.category_names();
    let banks = if path.is_dir() {
        BankSet::load_dir(path, &cats, weights, cfg)?
    } else {
        BankSet::build(&load_prompt_bank(path)?, &cats, weights, cfg)?
    };
    Ok(banks)
}

fn policy(c: &Common) -> ExecPolicy {
    if c.sequential {
        ExecPolicy::Sequential
    } else {
        ExecPolicy::Parallel
    }
}

fn emit<T: serde::Serialize>(out: Option<&Path>, value: &T, table: String) -> anyhow::Result<()> {
    print!("{table}");
    if let Some(p) = out {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        std::fs::write(p, s).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
    }
    Ok(())
}

fn bank_build(a: &BankBuildArgs, c: &Common) -> anyhow::Result<()> {
    let dataset = a.dataset.as_deref().map(Dataset::load).transpose()?;
    let categories: Vec<String> = if !a.categories.is_empty() {
        a.categories.clone()
    } else if let Some(ds) = &dataset {
        ds.doc.categories.iter().map(|c| c.name.clone()).collect()
    } else {
        fixture_categories().into_iter().map(str::to_owned).collect()
    };
    let requests: Vec<CategoryRequest> = categories
        .iter()
        .map(|cat| {
            let images = dataset
                .as_ref()
                .map(|ds| {
                    let id = ds.category_id(cat);
                    ds.doc
                        .images
                        .iter()
                        .filter(|img| ds.doc.annotations.iter().any(|an| an.image_id == img.id && Some(an.category_id) == id))
                        .map(|img| (img.id.to_string(), ds.image_path(img).display().to_string()))
                        .collect()
                })
                .unwrap_or_default();
            CategoryRequest {
                category: cat.clone(),
                images,
                questions: default_questions(cat),
            }
        })
        .collect();

    let timeout = Duration::from_millis(a.timeout_ms);
    let with_key = |h: HttpClient| match &a.api_key {
        Some(k) => h.with_bearer(k.clone()),
        None => h,
    };
    let vqa: Box<dyn VqaClient> = match &a.vqa_endpoint {
        Some(url) => Box::new(with_key(HttpClient::new(url.clone(), timeout))),
        None => Box::new(MockVqa::bundled()),
    };
    let (llm, llm_source): (Box<dyn LlmClient>, Source) = match &a.llm_endpoint {
        Some(url) => (Box::new(with_key(HttpClient::new(url.clone(), timeout))), Source::Llm),
        None => (Box::new(FixtureLlm::new()), Source::Fixture),
    };
    let options = ForgeOptions {
        retry: RetryPolicy { attempts: a.retries, timeout_ms: a.timeout_ms },
        max_in_flight: a.max_in_flight,
        llm_source,
    };
    let report = forge_prompt_bank(&requests, vqa.as_ref(), llm.as_ref(), options)?;
    for (cat, img, f) in &report.failures {
        eprintln!("warning: {cat} image {img}: `{}` failed: {}", f.question, f.error);
    }
    let mut bank: PromptBank = report.bank;
    if let Some(src) = &a.noise_from {
        let other = match bank.categories.get(src) {
            Some(set) => set.clone(),
            None => {
                let req = CategoryRequest { category: src.clone(), images: vec![], questions: default_questions(src) };
                let r = forge_prompt_bank(&[req], vqa.as_ref(), llm.as_ref(), options)?;
                r.bank.categories[src].clone()
            }
        };
        for (name, set) in bank.categories.iter_mut() {
            if name != src {
                *set = mix_noise(set, &other, a.noise_terms);
            }
        }
    }
    save_prompt_bank(&bank, &a.out)?;
    println!("wrote {} categories to {}", bank.categories.len(), a.out.display());
    if let Some(dir) = &a.cache {
        let cfg = resolve_config(c)?;
        let weights = load_weights(c, &cfg)?;
        let names: Vec<&str> = bank.categories.keys().map(String::as_str).collect();
        let set = BankSet::build(&bank, &names, &weights, &cfg)?;
        set.save_dir(dir)?;
        println!("wrote {} bank caches to {}", names.len(), dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Weights { out } => {
            let cfg = resolve_config(c)?;
            let w = ModelWeights::seeded(&cfg)?;
            w.save(out)?;
            println!("weights {} -> {}", w.digest(), out.display());
        }
        Command::BankBuild(a) => bank_build(a, c)?,
        Command::Detect { dataset, bank, out } => {
            let cfg = resolve_config(c)?;
            let weights = load_weights(c, &cfg)?;
            let corpus = Corpus::load(dataset)?;
            let banks = load_banks(bank, &corpus, &weights, &cfg)?;
            let (_, m) = run_detect(&corpus, &banks, &weights, &cfg, out, policy(c))?;
            println!(
                "mode {} images {} AP {:.4} AP50 {:.4} traces {}",
                match cfg.mode {
                    Mode::Baseline => "baseline",
                    Mode::Structural => "structural",
                },
                m.images,
                m.eval.ap,
                m.eval.ap50,
                m.traces
            );
        }
        Command::AblatePq { dataset, bank, p_values, q_values, out } => {
            let cfg = resolve_config(c)?;
            let weights = load_weights(c, &cfg)?;
            let corpus = Corpus::load(dataset)?;
            let banks = load_banks(bank, &corpus, &weights, &cfg)?;
            let grid = run_pq_grid(&corpus, &banks, &weights, &cfg, p_values, q_values, policy(c))?;
            emit(out.as_deref(), &grid, grid.render())?;
        }
        Command::AblateLayers { dataset, bank, strategy, out } => {
            let cfg = resolve_config(c)?;
            let weights = load_weights(c, &cfg)?;
            let corpus = Corpus::load(dataset)?;
            let banks = load_banks(bank, &corpus, &weights, &cfg)?;
            let strategies = match strategy.as_str() {
                "both" => vec![LayerStrategy::SingleLayer, LayerStrategy::SuffixRange],
                s => vec![s.parse()?],
            };
            let tables = strategies
                .into_iter()
                .map(|s| run_layer_ablation(&corpus, &banks, &weights, &cfg, s, policy(c)))
                .collect::<Result<Vec<_>, _>>()?;
            let text: String = tables
                .iter()
                .map(|t| format!("{:?}\n{}", t.strategy, t.render()))
                .collect();
            emit(out.as_deref(), &tables, text)?;
        }
        Command::Synth(a) => {
            let cfg = resolve_config(c)?;
            let weights = load_weights(c, &cfg)?;
            let mut spec = SynthSpec::from_fixture(&a.category, a.terms_per_kind, a.images, a.synth_seed.unwrap_or(cfg.seed))?;
            spec.width = a.width;
            spec.height = a.height;
            spec.patch = cfg.patch;
            spec.channels = cfg.channels;
            spec.objects_per_image = a.objects;
            spec.distractor_rate = a.distractor_rate;
            let out = synth_dataset(&spec, &weights)?;
            write_synth(&out, &a.out)?;
            save_prompt_bank(&spec.prompt_bank(), &a.out.join("prompts.json"))?;
            println!(
                "wrote {} images to {} (planted term `{}`)",
                out.corpus.images.len(),
                a.out.display(),
                spec.categories[0].planted_term
            );
        }
        Command::Freq { traces, out } => {
            let r = aggregate_selection_frequency(&read_trace_file(traces)?);
            emit(out.as_deref(), &r, r.render())?;
        }
        Command::Attn { traces, out } => {
            let s = attention_strength_stats(&read_trace_file(traces)?);
            emit(out.as_deref(), &s, s.render())?;
        }
        Command::Noisy { dataset, bank, noisy_bank, out } => {
            let cfg = resolve_config(c)?;
            let weights = load_weights(c, &cfg)?;
            let corpus = Corpus::load(dataset)?;
            let clean = load_banks(bank, &corpus, &weights, &cfg)?;
            let noisy = load_banks(noisy_bank, &corpus, &weights, &cfg)?;
            let r = run_noisy_knowledge(&corpus, &clean, &noisy, &weights, &cfg, policy(c))?;
            emit(out.as_deref(), &r, r.render())?;
        }
    }
    Ok(())
}

/// Exit status per error family; 2 is left to argument parsing.
fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match err {
        Error::Config(_) | Error::Capacity { .. } | Error::IndexOutOfRange { .. } => 3,
        Error::Io { .. } => 4,
        Error::Format(_) => 5,
        Error::Integrity(_) | Error::Stale { .. } => 6,
        Error::UndefinedMetric(_) => 7,
        Error::Client(_) | Error::EmptyPrompt(_) | Error::Generation(_) => 8,
        Error::NumericDomain(_) | Error::NoAttendable => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("promptground failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
