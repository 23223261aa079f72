use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use lngram_core::analysis::{bootstrap_report, cka_matrix, gate_summary, logitlens_profile, soft_alignment, PairedBenchmark};
use lngram_core::bench::{compare_reports, run_bench};
use lngram_core::checkpoint::{load_checkpoint, save_checkpoint};
use lngram_core::experiment::entity_gate_traces;
use lngram_core::gradcheck::gradcheck;
use lngram_core::{eval_ppl, gen_corpus, train_loop, Corpus, Decoder, LayerStates, LngramError, Result, RunConfig, StepLog};

use crate::Command;

/// Output directory plus the provenance every artifact carries.
struct Outputs {
    dir: PathBuf,
    hash: String,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
        Ok(Self { dir: dir.to_path_buf(), hash: cfg.hash()?, files: vec!["config.toml".into()] })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    /// Writes `value` with the config hash added at the top level.
    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("config_hash".into(), json!(self.hash));
        } else {
            v = json!({ "config_hash": self.hash, "value": v });
        }
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &v)?;
        writeln!(w)?;
        Ok(())
    }

    /// CSV with a leading `# config_hash` comment line.
    fn csv(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        writeln!(w, "# config_hash {}", self.hash)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        let files = std::mem::take(&mut self.files);
        self.json("manifest.json", &json!({ "command": command, "seed": cfg.seed, "config": cfg, "artifacts": files }))
    }
}

pub fn run(command: &Command, cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    let mut o = Outputs::new(out, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (name, code) = match command {
        Command::CorpusGen => ("corpus-gen", corpus_gen(cfg, &mut o)?),
        Command::Train => ("train", train(cfg, &mut rng, &mut o)?),
        Command::Eval { checkpoint, bucket } => ("eval", eval(cfg, checkpoint, *bucket, &mut o)?),
        Command::Gradcheck { cases } => ("gradcheck", grad_check(cfg, *cases, &mut rng, &mut o)?),
        Command::AnalyzeLogitlens { checkpoint } => ("analyze-logitlens", logitlens(cfg, checkpoint, &mut o)?),
        Command::AnalyzeCka { baseline, variant } => ("analyze-cka", cka(cfg, baseline, variant, &mut o)?),
        Command::AnalyzeBootstrap { input } => ("analyze-bootstrap", bootstrap(cfg, input, &mut rng, &mut o)?),
        Command::GateViz { checkpoint } => ("gate-viz", gate_viz(cfg, checkpoint, &mut o)?),
        Command::Bench { checkpoint } => ("bench", bench(cfg, checkpoint.as_deref(), &mut rng, &mut o)?),
    };
    o.finish(name, cfg)?;
    Ok(code)
}

fn corpus_gen(cfg: &RunConfig, o: &mut Outputs) -> Result<ExitCode> {
    let corpus = gen_corpus(&cfg.corpus)?;
    fs::write(o.path("train.bin"), &corpus.train)?;
    fs::write(o.path("val.bin"), &corpus.val)?;
    o.json(
        "entities.json",
        &json!({ "entities": corpus.entities, "train_index": corpus.train_index, "val_index": corpus.val_index }),
    )?;
    println!("train {} bytes, val {} bytes, {} planted entities", corpus.train.len(), corpus.val.len(), corpus.train_index.len() + corpus.val_index.len());
    Ok(ExitCode::SUCCESS)
}

fn train(cfg: &RunConfig, rng: &mut ChaCha8Rng, o: &mut Outputs) -> Result<ExitCode> {
    let corpus = gen_corpus(&cfg.corpus)?;
    let mut model = Decoder::<f32>::init(&cfg.model, rng)?;
    let loop_seed = rng.random::<u64>();
    let mut curve: Vec<StepLog> = Vec::new();
    let result = train_loop(&mut model, &corpus.train, &cfg.train, loop_seed, |log| {
        if log.step % 50 == 0 {
            eprintln!("step {} loss {:.4} grad norm {:.3}", log.step, log.loss, log.grad_norm);
        }
        curve.push(*log);
    });
    o.csv("loss.csv", |w| {
        writeln!(w, "{}", StepLog::CSV_HEADER)?;
        for log in &curve {
            writeln!(w, "{}", log.csv_row())?;
        }
        Ok(())
    })?;
    match result {
        Ok(_) => {}
        Err(LngramError::NonFiniteLoss { step, loss }) => {
            save_checkpoint(&o.path("diagnostic.ckpt"), &model, Some(&cfg.train))?;
            let recent = &curve[curve.len().saturating_sub(20)..];
            o.json("diagnostic.json", &json!({ "step": step, "loss": loss.to_string(), "recent_steps": recent }))?;
            eprintln!("non-finite loss {loss} at step {step}; model state and recent steps written to {}", o.dir.display());
            return Ok(ExitCode::FAILURE);
        }
        Err(e) => return Err(e),
    }
    save_checkpoint(&o.path("model.ckpt"), &model, Some(&cfg.train))?;
    let ppl = eval_ppl(&model, &corpus.val, cfg.train.seq_len, cfg.train.batch_size, cfg.train.seq_len)?;
    o.json("train.json", &json!({ "steps": curve.len(), "final_loss": curve.last().map(|l| l.loss), "val_perplexity": ppl.perplexity, "parameters": model.parameter_counts() }))?;
    println!("{} steps, validation perplexity {:.4}", curve.len(), ppl.perplexity);
    Ok(ExitCode::SUCCESS)
}

fn load(path: &Path) -> Result<Decoder<f32>> {
    Ok(load_checkpoint::<f32>(path, None)?.model)
}

fn eval(cfg: &RunConfig, checkpoint: &Path, bucket: usize, o: &mut Outputs) -> Result<ExitCode> {
    let model = load(checkpoint)?;
    let corpus = gen_corpus(&cfg.corpus)?;
    let report = eval_ppl(&model, &corpus.val, cfg.train.seq_len, cfg.train.batch_size, bucket)?;
    o.csv("ppl_buckets.csv", |w| {
        writeln!(w, "start,end,tokens,perplexity")?;
        for b in &report.buckets {
            writeln!(w, "{},{},{},{}", b.start, b.end, b.tokens, b.perplexity)?;
        }
        Ok(())
    })?;
    o.json("eval.json", &report)?;
    println!("validation perplexity {:.4} over {} tokens", report.perplexity, report.tokens);
    Ok(ExitCode::SUCCESS)
}

fn grad_check(cfg: &RunConfig, cases: usize, rng: &mut ChaCha8Rng, o: &mut Outputs) -> Result<ExitCode> {
    let report = gradcheck(&cfg.model.lngram, cases, rng.random())?;
    o.json("gradcheck.json", &report)?;
    println!(
        "surrogate max rel err {:.3e} (< {:e}), main path max rel err {:.3e} (< {:e}): {}",
        report.surrogate.max_rel_err,
        report.surrogate.threshold,
        report.main_path.max_rel_err,
        report.main_path.threshold,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// The first `samples` consecutive validation windows.
fn val_windows(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Vec<u32>>> {
    let len = cfg.train.seq_len;
    let windows: Vec<Vec<u32>> = corpus.val.chunks_exact(len).take(cfg.analysis.samples).map(|w| w.iter().map(|&b| b as u32).collect()).collect();
    if windows.is_empty() {
        return Err(LngramError::Input(format!("validation split is shorter than one window of {len}")));
    }
    Ok(windows)
}

fn hidden_states(model: &Decoder<f32>, windows: &[Vec<u32>]) -> Result<Vec<LayerStates<f32>>> {
    windows.iter().map(|w| model.forward_with_hidden(w)).collect()
}

fn logitlens(cfg: &RunConfig, checkpoint: &Path, o: &mut Outputs) -> Result<ExitCode> {
    let model = load(checkpoint)?;
    let corpus = gen_corpus(&cfg.corpus)?;
    let states = hidden_states(&model, &val_windows(cfg, &corpus)?)?;
    let profile = logitlens_profile(&model, &states)?;
    o.csv("logitlens.csv", |w| profile.write_csv(w))?;
    o.json("logitlens.json", &profile)?;
    for (l, k) in profile.kl.iter().enumerate() {
        println!("layer {l}: KL {k:.6}");
    }
    Ok(ExitCode::SUCCESS)
}

/// Layer outputs `1..=L` with every window's positions stacked as samples.
fn stacked_layers(model: &Decoder<f32>, windows: &[Vec<u32>]) -> Result<Vec<Array2<f64>>> {
    let states = hidden_states(model, windows)?;
    let layers = model.config.layers;
    Ok((1..=layers)
        .map(|l| {
            let parts: Vec<_> = states.iter().map(|s| s.states[l].mapv(f64::from)).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("windows share the model width")
        })
        .collect())
}

fn cka(cfg: &RunConfig, baseline: &Path, variant: &Path, o: &mut Outputs) -> Result<ExitCode> {
    let (a, b) = (load(baseline)?, load(variant)?);
    let corpus = gen_corpus(&cfg.corpus)?;
    let windows = val_windows(cfg, &corpus)?;
    let s = cka_matrix(&stacked_layers(&a, &windows)?, &stacked_layers(&b, &windows)?)?;
    let k = cfg.analysis.top_k.min(s.baseline_layers());
    let curve = soft_alignment(&s, k)?;
    o.csv("cka.csv", |w| s.write_csv(w))?;
    o.csv("alignment.csv", |w| curve.write_csv(w))?;
    o.json("cka.json", &json!({ "cka": s, "alignment": curve }))?;
    for (j, d) in curve.delta.iter().enumerate() {
        println!("variant layer {}: alignment {:.3}, delta {:+.3}", j + 1, curve.a[j], d);
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct BenchmarkInput {
    name: String,
    a: Vec<Flag>,
    b: Vec<Flag>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Flag {
    Bool(bool),
    Int(u8),
}

impl Flag {
    fn get(&self) -> Result<bool> {
        match self {
            Flag::Bool(b) => Ok(*b),
            Flag::Int(0) => Ok(false),
            Flag::Int(1) => Ok(true),
            Flag::Int(v) => Err(LngramError::Input(format!("correctness entries must be 0 or 1, got {v}"))),
        }
    }
}

fn bootstrap(cfg: &RunConfig, input: &Path, rng: &mut ChaCha8Rng, o: &mut Outputs) -> Result<ExitCode> {
    let raw: Vec<BenchmarkInput> = serde_json::from_str(&fs::read_to_string(input)?)?;
    let flags = |v: &[Flag]| v.iter().map(Flag::get).collect::<Result<Vec<bool>>>();
    let benchmarks = raw.iter().map(|r| Ok((r.name.clone(), flags(&r.a)?, flags(&r.b)?))).collect::<Result<Vec<PairedBenchmark>>>()?;
    let report = bootstrap_report(&benchmarks, cfg.analysis.bootstrap_trials, rng.random())?;
    o.csv("bootstrap.csv", |w| report.write_csv(w))?;
    o.json("bootstrap.json", &report)?;
    for e in &report.entries {
        println!("{}: delta {:+.2} pp [{:.2}, {:.2}], p {:.4}, Holm {:.4}", e.name, e.delta_pp, e.ci_low, e.ci_high, e.p_value, e.p_adjusted);
    }
    Ok(ExitCode::SUCCESS)
}

fn gate_viz(cfg: &RunConfig, checkpoint: &Path, o: &mut Outputs) -> Result<ExitCode> {
    let model = load(checkpoint)?;
    let corpus = gen_corpus(&cfg.corpus)?;
    let order = cfg.analysis.gate_order.unwrap_or_else(|| model.config.lngram.max_order());
    let layer = cfg.analysis.gate_layer;
    let limit = cfg.analysis.samples * cfg.train.seq_len;
    let (traces, marks) = entity_gate_traces(&model, &corpus, cfg.train.seq_len, cfg.train.batch_size, layer, limit)?;
    o.csv("gates.csv", |w| {
        writeln!(w, "window,t,s,n,score,gate,entity_final")?;
        for (i, (trace, m)) in traces.iter().zip(&marks).enumerate() {
            for r in &trace.records {
                writeln!(w, "{i},{},{},{},{},{},{}", r.t, r.s, r.n, r.score, r.gate, u8::from(m.contains(&r.t)))?;
            }
        }
        Ok(())
    })?;
    let summary = gate_summary(&traces, &marks, order)?;
    o.json("gate_summary.json", &json!({ "layer": layer, "summary": summary }))?;
    println!(
        "layer {layer} order {order}: entity-final mean {:.4}, corpus median {:.4}, ratio {:.3} over {} marked positions",
        summary.entity_final_mean, summary.corpus_median, summary.ratio, summary.entity_positions
    );
    Ok(ExitCode::SUCCESS)
}

fn bench(cfg: &RunConfig, checkpoint: Option<&Path>, rng: &mut ChaCha8Rng, o: &mut Outputs) -> Result<ExitCode> {
    let model = match checkpoint {
        Some(p) => load(p)?,
        None => Decoder::<f32>::init(&cfg.model, rng)?,
    };
    let seed = rng.random();
    let baseline = run_bench(&model.without_lngram(), &cfg.bench, seed)?;
    let with = run_bench(&model, &cfg.bench, seed)?;
    let comparison = compare_reports(baseline, with);
    o.json("bench.json", &comparison)?;
    for r in &comparison.rows {
        println!("{:<38} {:>12.3} {:>12.3} {:>8.3}", r.metric, r.baseline, r.lngram, r.ratio);
    }
    Ok(ExitCode::SUCCESS)
}
