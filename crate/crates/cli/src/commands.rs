use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{json, Value};

use ewe_core::config::RunConfig;
use ewe_core::eval::{ablation_csv, run_ablation, run_benchmark, AblationAxis, AblationGrid, BenchContext, System};
use ewe_core::feedback::{Datastore, Passage};
use ewe_core::memory::PrecomputeStore;
use ewe_core::model::{Tokenizer, TransformerWeights};
use ewe_core::orchestrator::{memory_timeline, Event, EventLog, Generator};
use ewe_core::par::{self, Execution};
use ewe_core::pipeline::train_on_world;
use ewe_core::toyworld::{
    generate_world, prompt_for, render_corpus, render_prompts, write_lines, World, WorldSpec,
};

use crate::settings::resolve;
use crate::{AblateArgs, Cli, Command, EvalArgs, Failure, GenerateArgs, IngestArgs, InspectArgs, TrainArgs, WorldArgs};

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

type Outcome<T> = Result<T, Failure>;

pub fn run(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::World(a) => world(cli, a),
        Command::Ingest(a) => ingest(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Inspect(a) => inspect(cli, a),
    }
}

/// Attaches the path to I/O and parse failures.
fn at<T>(path: &Path, r: ewe_core::Result<T>) -> Outcome<T> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome<()> {
    at(path, std::fs::write(path, text).map_err(Into::into))
}

fn ensure_dir(dir: &Path) -> Outcome<()> {
    at(dir, std::fs::create_dir_all(dir).map_err(Into::into))
}

fn flat_config(cfg: &RunConfig) -> Outcome<Value> {
    Ok(serde_json::to_value(cfg.to_flat()?).map_err(ewe_core::Error::from)?)
}

fn load_world(dir: &Path) -> Outcome<World> {
    let path = dir.join("world.json");
    at(&path, World::load(&path))
}

fn checkpoint_path(cli: &Cli, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.data_dir.join("model.ckpt"))
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_model(ckpt: &Path) -> Outcome<(TransformerWeights, Tokenizer)> {
    let weights = at(ckpt, TransformerWeights::load(ckpt))?;
    let meta_path = sidecar(ckpt);
    let meta: Value = at(
        &meta_path,
        std::fs::read_to_string(&meta_path)
            .map_err(ewe_core::Error::from)
            .and_then(|t| serde_json::from_str(&t).map_err(Into::into)),
    )?;
    let tokenizer = at(
        &meta_path,
        serde_json::to_string(&meta["tokenizer"])
            .map_err(ewe_core::Error::from)
            .and_then(|t| Tokenizer::from_json(&t)),
    )?;
    if meta["fingerprint"].as_str() != Some(weights.fingerprint().as_str()) {
        return Err(Failure::Runtime(format!(
            "{}: fingerprint does not match {}",
            meta_path.display(),
            ckpt.display()
        )));
    }
    Ok((weights, tokenizer))
}

/// Ingested passages if present, then the world datastore, then the world itself.
fn load_passages(dir: &Path, world: &World) -> Outcome<Vec<Passage>> {
    for path in [dir.join("index").join("passages.jsonl"), dir.join("datastore.jsonl")] {
        if path.exists() {
            return at(&path, Datastore::read_jsonl(&path));
        }
    }
    Ok(render_corpus(world))
}

fn open_store(dir: &Path, enabled: bool) -> Outcome<Option<Mutex<PrecomputeStore>>> {
    if !enabled {
        return Ok(None);
    }
    let path = dir.join("precompute");
    let store = if path.join("index.json").exists() {
        at(&path, PrecomputeStore::load(&path))?
    } else {
        PrecomputeStore::new()
    };
    Ok(Some(Mutex::new(store)))
}

fn save_store(dir: &Path, store: Option<Mutex<PrecomputeStore>>) -> Outcome<()> {
    if let Some(s) = store {
        let path = dir.join("precompute");
        let s = s.into_inner().map_err(|_| Failure::Runtime("precompute store poisoned".into()))?;
        at(&path, s.save(&path))?;
    }
    Ok(())
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn world(cli: &Cli, a: &WorldArgs) -> Outcome<()> {
    let spec = WorldSpec {
        seed: cli.seed.unwrap_or(0),
        n_entities: a.entities,
        facts_per_entity: a.facts_per_entity,
        corruption_rate: a.corruption_rate,
        ..WorldSpec::default()
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let w = generate_world(&spec)?;
    let dir = &cli.data_dir;
    ensure_dir(dir)?;
    let path = dir.join("world.json");
    at(&path, w.save(&path))?;
    let corpus: Vec<String> = w
        .training_facts()
        .iter()
        .map(|f| w.render(f))
        .collect::<ewe_core::Result<_>>()?;
    let path = dir.join("corpus.txt");
    at(&path, write_lines(&path, &corpus))?;
    let path = dir.join("datastore.jsonl");
    at(&path, Datastore::write_jsonl(&path, &render_corpus(&w)))?;
    let prompts = render_prompts(&w, w.entities.len())?;
    let mut lines = Vec::new();
    for p in &prompts {
        lines.push(serde_json::to_string(p).map_err(ewe_core::Error::from)?);
    }
    let path = dir.join("prompts.jsonl");
    at(&path, write_lines(&path, &lines))?;
    let meta = json!({ "world": spec, "code_version": CODE_VERSION });
    write(&dir.join("world.meta.json"), &serde_json::to_string_pretty(&meta).unwrap())?;
    println!(
        "world: {} entities, {} facts, {} corrupted in the training corpus -> {}",
        w.entities.len(),
        w.facts.len(),
        w.corruptions.len(),
        dir.display()
    );
    Ok(())
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Outcome<()> {
    let cfg = resolve(cli, |c| {
        if a.precompute {
            c.generation.memory.precompute = true;
        }
        if let Some(f) = a.fraction {
            c.generation.retrieval.fraction = f;
        }
        Ok(())
    })?;
    let input = a.input.clone().unwrap_or_else(|| cli.data_dir.join("datastore.jsonl"));
    let passages = at(&input, Datastore::read_jsonl(&input))?;
    let kept = Datastore::sample_passages(&passages, cfg.generation.retrieval.fraction, cli.seed.unwrap_or(0))?;
    // Building the scorer checks ids are unique and the store is non-empty.
    at(&input, Datastore::new(kept.clone(), cfg.generation.retrieval.scorer))?;
    let out = cli.data_dir.join("index");
    ensure_dir(&out)?;
    let path = out.join("passages.jsonl");
    at(&path, Datastore::write_jsonl(&path, &kept))?;
    let meta = json!({
        "config": flat_config(&cfg)?,
        "code_version": CODE_VERSION,
        "source": input.display().to_string(),
        "passages": kept.len(),
        "seed": cli.seed.unwrap_or(0),
    });
    write(&out.join("meta.json"), &serde_json::to_string_pretty(&meta).unwrap())?;
    if a.precompute {
        let ckpt = checkpoint_path(cli, &a.checkpoint);
        let (weights, tokenizer) = load_model(&ckpt)?;
        let mut store = PrecomputeStore::new();
        for p in &kept {
            let mut tokens = tokenizer.tokenize(&p.text);
            let m = cfg.generation.memory.unit_len;
            tokens.truncate(m);
            store.lookup_or_encode(&weights, &format!("{}#{m}", p.id), &tokens)?;
        }
        let path = cli.data_dir.join("precompute");
        at(&path, store.save(&path))?;
        println!("precomputed {} passage encodings -> {}", store.len(), path.display());
    }
    println!("ingested {} of {} passages -> {}", kept.len(), passages.len(), out.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome<()> {
    let cfg = resolve(cli, |c| {
        if let Some(s) = cli.seed {
            c.model.seed = s;
            c.train.seed = s;
            c.curriculum.seed = s;
        }
        if let Some(s) = a.steps {
            c.train.steps = s;
        }
        if let Some(lr) = a.lr {
            c.train.learning_rate = lr;
        }
        if a.sequential {
            c.train.execution = Execution::Sequential;
        }
        Ok(())
    })?;
    let w = load_world(&cli.data_dir)?;
    let trained = train_on_world(&cfg, &w)?;
    let ckpt = cli.data_dir.join("model.ckpt");
    at(&ckpt, trained.weights.save(&ckpt))?;
    let tokenizer: Value = serde_json::from_str(&trained.tokenizer.to_json()?).map_err(ewe_core::Error::from)?;
    let config = flat_config(&cfg)?;
    let meta = json!({
        "config": config,
        "code_version": CODE_VERSION,
        "world": w.spec,
        "fingerprint": trained.weights.fingerprint(),
        "parameters": trained.weights.parameter_count(),
        "plain_loss": trained.plain_loss,
        "final_batch_loss": trained.loss_trace.last(),
        "tokenizer": tokenizer,
    });
    write(&sidecar(&ckpt), &serde_json::to_string_pretty(&meta).unwrap())?;
    let mut csv = format!("# code_version: {CODE_VERSION}\n# config: {config}\nstep,loss\n");
    for (i, l) in trained.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write(&cli.data_dir.join("loss.csv"), &csv)?;
    println!(
        "trained {} parameters for {} steps; plain loss {:.4} nats/token -> {}",
        trained.weights.parameter_count(),
        trained.loss_trace.len(),
        trained.plain_loss,
        ckpt.display()
    );
    Ok(())
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Outcome<()> {
    let cfg = resolve(cli, |c| {
        if let Some(s) = cli.seed {
            c.generation.seed = s;
        }
        a.gen.apply(&mut c.generation)
    })?;
    let dir = &cli.data_dir;
    let w = load_world(dir)?;
    let (weights, tokenizer) = load_model(&checkpoint_path(cli, &a.checkpoint))?;
    let prompt = match (&a.prompt, &a.entity) {
        (Some(p), _) => p.clone(),
        (None, Some(e)) if w.is_entity(e) => prompt_for(e),
        (None, Some(e)) => return Err(Failure::Usage(format!("--entity: {e} is not in the world"))),
        (None, None) => prompt_for(&w.entities[0]),
    };
    let g = &cfg.generation;
    let passages = Datastore::sample_passages(&load_passages(dir, &w)?, g.retrieval.fraction, g.seed)?;
    let ds = Datastore::new(passages, g.retrieval.scorer)?;
    let store = open_store(dir, g.memory.precompute)?;
    let print_event = |e: &Event| {
        if let Ok(line) = serde_json::to_string(e) {
            eprintln!("{line}");
        }
    };
    let mut gen = Generator::new(&weights, &tokenizer, g).with_retriever(&ds).with_checker(&w);
    if a.trace {
        gen = gen.with_sink(&print_event);
    }
    if let Some(s) = &store {
        gen = gen.with_store(s);
    }
    let out = gen.generate(&prompt)?;
    save_store(dir, store)?;
    let header = json!({ "header": {
        "config": flat_config(&cfg)?,
        "code_version": CODE_VERSION,
        "checkpoint": weights.fingerprint(),
        "prompt": prompt,
        "finish": out.finish,
        "steps": out.steps,
    }});
    let mut text = serde_json::to_string(&header).map_err(ewe_core::Error::from)?;
    text.push('\n');
    text.push_str(&out.events.to_jsonl()?);
    let path = a.events.clone().unwrap_or_else(|| dir.join("events.jsonl"));
    write(&path, &text)?;
    println!("{}", out.response);
    Ok(())
}

struct Loaded {
    world: World,
    weights: TransformerWeights,
    tokenizer: Tokenizer,
    passages: Vec<Passage>,
}

fn load_all(cli: &Cli, ckpt: &Option<PathBuf>) -> Outcome<Loaded> {
    let world = load_world(&cli.data_dir)?;
    let (weights, tokenizer) = load_model(&checkpoint_path(cli, ckpt))?;
    let passages = load_passages(&cli.data_dir, &world)?;
    Ok(Loaded {
        world,
        weights,
        tokenizer,
        passages,
    })
}

fn eval_settings(cli: &Cli, c: &mut RunConfig, threads: Option<usize>, prompts: Option<usize>) {
    if let Some(s) = cli.seed {
        c.eval.seeds = vec![s];
    }
    if let Some(t) = threads {
        c.eval.threads = t;
    }
    if let Some(p) = prompts {
        c.eval.prompts = p;
    }
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome<()> {
    let cfg = resolve(cli, |c| {
        eval_settings(cli, c, a.threads, a.prompts);
        if !a.systems.is_empty() {
            c.eval.systems = a.systems.clone();
        }
        a.gen.apply(&mut c.generation)
    })?;
    let l = load_all(cli, &a.checkpoint)?;
    let systems: Vec<System> = cfg
        .eval
        .systems
        .iter()
        .map(|s| System::parse(s))
        .collect::<ewe_core::Result<_>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let prompts = render_prompts(&l.world, cfg.eval.prompts).map_err(|e| Failure::Usage(e.to_string()))?;
    let store = open_store(&cli.data_dir, cfg.generation.memory.precompute)?;
    let mut ctx = BenchContext::new(&l.weights, &l.tokenizer, &l.world, &l.passages);
    if let Some(s) = &store {
        ctx = ctx.with_store(s);
    }
    let report = par::with_threads(cfg.eval.threads, || {
        run_benchmark(&ctx, &cfg.generation, &systems, &prompts, &cfg.eval.seeds, execution(a.sequential))
    })?;
    drop(ctx);
    save_store(&cli.data_dir, store)?;
    let path = a.out.clone().unwrap_or_else(|| cli.data_dir.join("bench.jsonl"));
    write(&path, &report.to_jsonl(&flat_config(&cfg)?)?)?;
    println!("{:<18} {:>5} {:>9} {:>7} {:>7} {:>7}", "system", "runs", "precision", "recall", "f1", "claims");
    for s in &report.summaries {
        println!(
            "{:<18} {:>5} {:>9.3} {:>7.3} {:>7.3} {:>7.2}",
            s.system.name(),
            s.runs,
            s.precision,
            s.recall,
            s.f1,
            s.mean_claims
        );
    }
    println!("cap {} -> {}", report.cap, path.display());
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Outcome<()> {
    let axis = AblationAxis::parse(&a.axis).map_err(|e| Failure::Usage(format!("--axis: {e}")))?;
    let cfg = resolve(cli, |c| {
        eval_settings(cli, c, a.threads, a.prompts);
        a.gen.apply(&mut c.generation)
    })?;
    for &v in &a.values {
        axis.apply(&cfg.generation, v).map_err(|e| Failure::Usage(format!("--values: {e}")))?;
    }
    let l = load_all(cli, &a.checkpoint)?;
    let prompts = render_prompts(&l.world, cfg.eval.prompts).map_err(|e| Failure::Usage(e.to_string()))?;
    let store = open_store(&cli.data_dir, cfg.generation.memory.precompute)?;
    let mut ctx = BenchContext::new(&l.weights, &l.tokenizer, &l.world, &l.passages);
    if let Some(s) = &store {
        ctx = ctx.with_store(s);
    }
    let exec = execution(a.sequential);
    let grid = AblationGrid {
        axis,
        values: a.values.clone(),
        seeds: cfg.eval.seeds.clone(),
    };
    let rows = par::with_threads(cfg.eval.threads, || -> ewe_core::Result<_> {
        let cap = match a.cap {
            Some(c) => c,
            None => run_benchmark(&ctx, &cfg.generation, &[System::Plain], &prompts, &cfg.eval.seeds, exec)?.cap,
        };
        run_ablation(&ctx, &grid, &cfg.generation, &prompts, cap, exec)
    })?;
    drop(ctx);
    save_store(&cli.data_dir, store)?;
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| cli.data_dir.join(format!("ablation_{}.csv", axis.name())));
    write(&path, &ablation_csv(&rows, &flat_config(&cfg)?)?)?;
    println!("{:>8} {:>5} {:>9} {:>7} {:>10} {:>10}", "value", "seed", "precision", "f1", "passages", "backtracks");
    for r in &rows {
        println!(
            "{:>8} {:>5} {:>9.3} {:>7.3} {:>10} {:>10}",
            r.value, r.seed, r.precision, r.f1, r.retrieved_passages, r.backtracks
        );
    }
    println!("-> {}", path.display());
    Ok(())
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Outcome<()> {
    let path = a.events.clone().unwrap_or_else(|| cli.data_dir.join("events.jsonl"));
    let log = at(&path, EventLog::read(&path))?;
    for line in memory_timeline(&log) {
        println!("{line}");
    }
    if let Ok(text) = std::fs::read_to_string(sidecar(&cli.data_dir.join("model.ckpt"))) {
        let meta: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        if let Ok(tok) = Tokenizer::from_json(&meta["tokenizer"].to_string()) {
            println!("response: {}", log.replay(&tok));
        }
    }
    Ok(())
}
