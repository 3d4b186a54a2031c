//! `prism`: init-lm, synth-data, embed, train, eval-retrieval, eval-classify,
//! vocabmap and bench-fda over the prism-core pipeline.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 numeric abort.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use prism_core::aligner::{
    load_model, AlignModel, Checkpoint, OnlineText, TextSource, TrainData, Trainer,
};
use prism_core::config::{EvalText, RunConfig};
use prism_core::eval::{
    evaluate_retrieval, render_overlay, retrieval_table, text_matrix, vocab_map, zero_shot_classify,
};
use prism_core::facet::{bench_captions, bench_fda, bench_prompts};
use prism_core::imageio::{load_image, preprocess_rgb, read_image, write_ppm};
use prism_core::lm::{FrozenLm, LmPreset};
use prism_core::store::{precompute, Corpus, EmbeddingStore};
use prism_core::synth::{generate_scenes, write_corpus};
use prism_core::{Error, FormatError};

#[derive(Parser, Debug)]
#[command(
    name = "prism",
    version,
    about = "Frozen-LM language-image pre-training toolkit"
)]
struct Cli {
    /// JSON run config; missing sections and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded frozen LM weights.
    InitLm(InitLmArgs),
    /// Render a synthetic shapes corpus (JSONL + PPM images).
    SynthData(SynthArgs),
    /// Precompute facet embeddings for a corpus into FLME shards.
    Embed(EmbedArgs),
    /// Train the vision encoder and projection against frozen text embeddings.
    Train(TrainArgs),
    /// Image-text retrieval recall@k on a corpus.
    EvalRetrieval(RetrievalArgs),
    /// Zero-shot classification from a corpus label field.
    EvalClassify(ClassifyArgs),
    /// Map image patches to LM vocabulary words.
    Vocabmap(VocabmapArgs),
    /// Time single-pass facet embedding against K separate passes.
    BenchFda(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Tiny,
    Small,
}

#[derive(Args, Debug)]
struct InitLmArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives corpus.jsonl and images/.
    #[arg(long)]
    out: PathBuf,
    /// One object per scene (the held-out classification split).
    #[arg(long)]
    single_object: bool,
    #[arg(long, default_value_t = 0)]
    first_id: u64,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    shard_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Precomputed embedding store directory.
    #[arg(long, required_unless_present = "lm")]
    store: Option<PathBuf>,
    /// Embed captions on the fly with this LM instead of reading a store.
    #[arg(long, conflicts_with = "store")]
    lm: Option<PathBuf>,
    /// Checkpoint path written at the end.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON-lines metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RetrievalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// `short`, `mean`, or a facet index.
    #[arg(long)]
    text: Option<String>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Label field of the corpus records.
    #[arg(long)]
    task: String,
    /// Comma-separated class names; defaults to the values present in the corpus.
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<String>>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct VocabmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    pool: Option<usize>,
    /// Write a PPM overlay of the token grid.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// LM weights; a seeded LM from the config is used when absent.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 256)]
    prefix: usize,
    #[arg(long, default_value_t = 8)]
    captions: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::InitLm(a) => init_lm(&mut cfg, a),
        Command::SynthData(a) => synth_data(a),
        Command::Embed(a) => embed(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::EvalRetrieval(a) => eval_retrieval(&mut cfg, a),
        Command::EvalClassify(a) => eval_classify(&mut cfg, a),
        Command::Vocabmap(a) => vocabmap(&mut cfg, a),
        Command::BenchFda(a) => bench(&mut cfg, a),
    }
}

fn log_config(cfg: &RunConfig) -> Result<(), Error> {
    cfg.validate()?;
    info!("resolved config:\n{}", cfg.to_json());
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn init_lm(cfg: &mut RunConfig, a: InitLmArgs) -> Result<(), Error> {
    if let Some(seed) = a.seed {
        cfg.lm.seed = seed;
    }
    if let Some(p) = a.preset {
        cfg.lm.preset = match p {
            Preset::Tiny => LmPreset::Tiny,
            Preset::Small => LmPreset::Small,
        };
    }
    log_config(cfg)?;
    let lm = FrozenLm::init(cfg.lm.config(), cfg.lm.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    lm.save(&a.out)?;
    let c = lm.config();
    println!(
        "wrote {} (vocab {}, d {}, layers {}, heads {})",
        a.out.display(),
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads
    );
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<(), Error> {
    let scenes = generate_scenes(a.n, a.seed, if a.single_object { 1 } else { 2 })?;
    let corpus = write_corpus(&scenes, a.first_id, &a.out)?;
    let path = a.out.join("corpus.jsonl");
    write_text(&path, &corpus.to_jsonl())?;
    println!("wrote {} records to {}", corpus.len(), path.display());
    Ok(())
}

fn embed(cfg: &mut RunConfig, a: EmbedArgs) -> Result<(), Error> {
    if let Some(s) = a.shard_size {
        cfg.store.shard_size = s;
    }
    log_config(cfg)?;
    let corpus = Corpus::load_jsonl(&a.corpus)?;
    let lm = FrozenLm::load(&a.lm)?;
    let prompts = cfg.prompts.resolve()?;
    let shards = precompute(&corpus, &lm, &prompts, cfg.store.shard_size, &a.out)?;
    println!(
        "embedded {} captions x {} facets into {} shard(s) under {}",
        corpus.len(),
        prompts.len(),
        shards.len(),
        a.out.display()
    );
    Ok(())
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> Result<(), Error> {
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    log_config(cfg)?;
    let corpus = Corpus::load_jsonl(&a.corpus)?;
    let data = TrainData::load(&corpus, cfg.vit.image_size)?;

    let (store, lm, prompts);
    let text: &dyn TextSource = match (&a.store, &a.lm) {
        (Some(dir), _) => {
            store = EmbeddingStore::open(dir)?;
            &store
        }
        (None, Some(path)) => {
            lm = FrozenLm::load(path)?;
            prompts = cfg.prompts.resolve()?;
            &OnlineText::new(&lm, &prompts, &corpus)
        }
        (None, None) => return Err(Error::Config("train needs --store or --lm".into())),
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let template = AlignModel::new(cfg.vit.clone(), text.d_t(), cfg.train.seed)?;
            Trainer::resume(
                Checkpoint::load_into(path, template)?,
                cfg.train.clone(),
                &data,
                text,
            )?
        }
        None => Trainer::new(
            AlignModel::new(cfg.vit.clone(), text.d_t(), cfg.train.seed)?,
            cfg.train.clone(),
            &data,
            text,
        )?,
    };
    let mut log_file = a.metrics.as_deref().map(create).transpose()?;
    let metrics = trainer.run(log_file.as_mut().map(|w| w as &mut dyn Write))?;
    if let (Some(w), Some(path)) = (log_file.as_mut(), a.metrics.as_deref()) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    trainer.checkpoint().save(&a.out)?;
    match metrics.last() {
        Some(m) => println!(
            "trained to step {} (loss {:.4}, tau {:.4}); checkpoint {}",
            trainer.step,
            m.loss,
            trainer.model.tau(),
            a.out.display()
        ),
        None => println!(
            "nothing to do at step {}; checkpoint {}",
            trainer.step,
            a.out.display()
        ),
    }
    Ok(())
}

fn parse_eval_text(s: &str) -> Result<EvalText, Error> {
    match s {
        "short" => Ok(EvalText::Short),
        "mean" => Ok(EvalText::Mean),
        other => other.parse().map(EvalText::Facet).map_err(|_| {
            Error::Config(format!(
                "--text must be short, mean or a facet index, got {other:?}"
            ))
        }),
    }
}

fn load_images(
    corpus: &Corpus,
    size: usize,
) -> Result<Vec<prism_core::imageio::ImageTensor>, Error> {
    corpus
        .records
        .iter()
        .map(|r| load_image(&corpus.image_path(r), size))
        .collect()
}

fn eval_retrieval(cfg: &mut RunConfig, a: RetrievalArgs) -> Result<(), Error> {
    if let Some(t) = &a.text {
        cfg.eval.text = parse_eval_text(t)?;
    }
    let model = load_model(&a.model)?;
    cfg.vit = model.vit_config().clone();
    log_config(cfg)?;
    let corpus = Corpus::load_jsonl(&a.corpus)?;
    let store = EmbeddingStore::open(&a.store)?;
    let prompts = cfg.prompts.resolve()?;
    if prompts.len() != store.facets() {
        return Err(Error::Config(format!(
            "store has {} facets but the prompt set has {}",
            store.facets(),
            prompts.len()
        )));
    }
    let ids: Vec<u64> = corpus.records.iter().map(|r| r.id).collect();
    let texts = text_matrix(&store, &ids, cfg.eval.text.aggregation(&prompts)?)?;
    let images = load_images(&corpus, model.vit_config().image_size)?;
    let refs: Vec<_> = images.iter().collect();
    let image_embs = model.embed_images(&refs)?;
    let reports = evaluate_retrieval(&image_embs, &texts, &cfg.eval.ks)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&reports).expect("report serializes")
        );
    } else {
        print!("{}", retrieval_table(&reports));
    }
    Ok(())
}

fn eval_classify(cfg: &mut RunConfig, a: ClassifyArgs) -> Result<(), Error> {
    if let Some(t) = a.template {
        cfg.eval.template = t;
    }
    let model = load_model(&a.model)?;
    cfg.vit = model.vit_config().clone();
    log_config(cfg)?;
    let corpus = Corpus::load_jsonl(&a.corpus)?;
    let lm = FrozenLm::load(&a.lm)?;
    let inventory = cfg.prompts.inventory()?;
    let prompt = inventory
        .short_prompt()
        .ok_or_else(|| Error::Config("prompt inventory has no short-default prompt".into()))?;

    let mut values = Vec::with_capacity(corpus.len());
    for r in &corpus.records {
        let v = r.labels.get(&a.task).ok_or_else(|| {
            FormatError::Malformed(format!("sample {} has no {:?} label", r.id, a.task))
        })?;
        values.push(v.clone());
    }
    let labels = match a.labels {
        Some(l) => l,
        None => values
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let truth = values
        .iter()
        .map(|v| {
            labels.iter().position(|l| l == v).ok_or_else(|| {
                Error::Config(format!("label {v:?} is not among the classes {labels:?}"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images = load_images(&corpus, model.vit_config().image_size)?;
    let refs: Vec<_> = images.iter().collect();
    let report = zero_shot_classify(
        &model,
        &lm,
        prompt,
        &refs,
        &truth,
        &labels,
        &cfg.eval.template,
    )?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn vocabmap(cfg: &mut RunConfig, a: VocabmapArgs) -> Result<(), Error> {
    if let Some(p) = a.pool {
        cfg.eval.pool = p;
    }
    let model = load_model(&a.model)?;
    cfg.vit = model.vit_config().clone();
    log_config(cfg)?;
    let lm = FrozenLm::load(&a.lm)?;
    let rgb = read_image(&a.image)?;
    let image = preprocess_rgb(&rgb, model.vit_config().image_size)?;
    let map = vocab_map(&model, &lm, &image, cfg.eval.pool)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&map).expect("map serializes")
        );
    } else {
        print!("{}", map.to_text());
    }
    if let Some(path) = &a.overlay {
        write_ppm(path, &render_overlay(&rgb, &map, 4))?;
        info!("overlay written to {}", path.display());
    }
    Ok(())
}

fn bench(cfg: &mut RunConfig, a: BenchArgs) -> Result<(), Error> {
    log_config(cfg)?;
    let lm = match &a.lm {
        Some(path) => FrozenLm::load(path)?,
        None => FrozenLm::init(cfg.lm.config(), cfg.lm.seed)?,
    };
    let prompts = bench_prompts(a.k)?;
    let captions = bench_captions(a.captions, a.prefix);
    let report = bench_fda(&lm, &captions, &prompts, a.reps)?;
    println!("{}", report.to_json_line());
    eprint!("{}", report.to_text());
    Ok(())
}
