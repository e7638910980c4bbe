//! Resolved runs, their manifests and the code that executes them.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memefuse_core::checkpoint;
use memefuse_core::data::{self, MemeSample, Task};
use memefuse_core::embeddings::{load_glove_filtered, EmbeddingTable};
use memefuse_core::model::{corpus_vocab, init_params};
use memefuse_core::synthetic::{gradcheck_suite, GRADCHECK_STEP};
use memefuse_core::train::{self, TrainConfig};
use memefuse_core::{Error, ModelConfig, ModelParams, Result};
use serde::{Deserialize, Serialize};

use crate::{ConvertArgs, EvalArgs, ExportArgs, GradcheckArgs, PredictArgs, TrainArgs};

pub const MANIFEST: &str = "manifest.json";
const DEFAULT_OUT: &str = "memefuse-out";
/// Largest finite-difference error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub task: Task,
    pub data: PathBuf,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// `<out>/model.ckpt` when absent.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub glove: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainRun {
    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub glove: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRun {
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertRun {
    pub csv: PathBuf,
    pub out: PathBuf,
    pub features_dir: String,
    pub delimiter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Run {
    Train(TrainRun),
    Evaluate(InferRun),
    Predict(InferRun),
    Gradcheck(GradcheckRun),
    ExportAttention(InferRun),
    ConvertDataset(ConvertRun),
}

impl Run {
    fn seed(&self) -> Option<u64> {
        match self {
            Run::Train(r) => Some(r.train.seed),
            Run::Gradcheck(r) => Some(r.seed),
            _ => None,
        }
    }

    fn with_out(mut self, out: PathBuf) -> Self {
        match &mut self {
            Run::Train(r) => r.out = out,
            Run::Evaluate(r) | Run::Predict(r) | Run::ExportAttention(r) => r.out = Some(out),
            Run::Gradcheck(r) => r.out = Some(out),
            Run::ConvertDataset(r) => r.out = out,
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub code_version: String,
    pub seed: Option<u64>,
    pub run: Run,
}

/// Optional JSON file for `train`. Relative paths are taken from the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    task: Option<String>,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    test: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    glove: Option<PathBuf>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn abs_opt(p: Option<PathBuf>) -> Result<Option<PathBuf>> {
    p.map(|p| absolute(&p)).transpose()
}

/// Merges the config file and flags (flags win) and checks required settings.
pub fn resolve_train(a: TrainArgs) -> Result<Run> {
    let file = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut f: TrainFile =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut f.data, &mut f.val, &mut f.test, &mut f.checkpoint, &mut f.out, &mut f.glove]
                .into_iter()
                .flatten()
            {
                *p = base.join(&*p);
            }
            f
        }
        None => TrainFile::default(),
    };
    let task = a
        .task
        .or(file.task)
        .ok_or_else(|| Error::Config("--task is required".into()))?;
    let data = a
        .data
        .or(file.data)
        .ok_or_else(|| Error::Config("--data is required".into()))?;
    let mut model = file.model.unwrap_or_default();
    if let Some(h) = a.hops_unimodal {
        model.text_hops = h;
        model.visual_hops = h;
    }
    if let Some(h) = a.hops_segment {
        model.segment_hops = h;
    }
    model.validate()?;
    let mut cfg = file.train.unwrap_or_default();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr.initial = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    if let Some(w) = &a.class_weights {
        let w: Vec<Vec<f64>> =
            serde_json::from_str(w).map_err(|e| Error::Config(format!("--class-weights: {e}")))?;
        cfg.class_weights = Some(w);
    }
    let task = Task::parse(&task)?;
    cfg.validate()?;
    cfg.weights(task).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Run::Train(TrainRun {
        task,
        data: absolute(&data)?,
        val: abs_opt(a.val.or(file.val))?,
        test: abs_opt(a.test.or(file.test))?,
        checkpoint: abs_opt(a.checkpoint.or(file.checkpoint))?,
        out: absolute(&a.out.or(file.out).unwrap_or_else(|| DEFAULT_OUT.into()))?,
        glove: abs_opt(a.glove.or(file.glove))?,
        model,
        train: cfg,
    }))
}

fn infer_run(checkpoint: PathBuf, data: PathBuf, glove: Option<PathBuf>, out: Option<PathBuf>) -> Result<InferRun> {
    Ok(InferRun {
        checkpoint: absolute(&checkpoint)?,
        data: absolute(&data)?,
        glove: abs_opt(glove)?,
        out: abs_opt(out)?,
    })
}

pub fn resolve_evaluate(a: EvalArgs) -> Result<Run> {
    infer_run(a.checkpoint, a.data, a.glove, a.out).map(Run::Evaluate)
}

pub fn resolve_predict(a: PredictArgs) -> Result<Run> {
    infer_run(a.checkpoint, a.data, a.glove, Some(a.out)).map(Run::Predict)
}

pub fn resolve_export(a: ExportArgs) -> Result<Run> {
    infer_run(a.checkpoint, a.data, a.glove, Some(a.out)).map(Run::ExportAttention)
}

pub fn resolve_gradcheck(a: GradcheckArgs) -> Result<Run> {
    Ok(Run::Gradcheck(GradcheckRun {
        seed: a.seed,
        out: abs_opt(a.out)?,
    }))
}

pub fn resolve_convert(a: ConvertArgs) -> Result<Run> {
    if a.delimiter.is_empty() {
        return Err(Error::Config("--delimiter must not be empty".into()));
    }
    Ok(Run::ConvertDataset(ConvertRun {
        csv: absolute(&a.csv)?,
        out: absolute(&a.out)?,
        features_dir: a.features_dir,
        delimiter: a.delimiter,
    }))
}

/// Re-executes the run recorded in a manifest, optionally into another directory.
pub fn replay(manifest: &Path, out: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", manifest.display())))?;
    if m.code_version != env!("CARGO_PKG_VERSION") {
        log::warn!(
            "manifest was written by version {}, running {}",
            m.code_version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let run = match out {
        Some(o) => m.run.with_out(absolute(&o)?),
        None => m.run,
    };
    execute(run)
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    io(dir, fs::create_dir_all(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io(path, fs::write(path, text))
}

fn write_manifest(run: &Run, path: &Path) -> Result<()> {
    let m = Manifest {
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: run.seed(),
        run: run.clone(),
    };
    write_json(path, &m)
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(io(path, fs::File::create(path))?))
}

fn token_set<'a>(sets: impl IntoIterator<Item = &'a [MemeSample]>) -> HashSet<String> {
    sets.into_iter()
        .flatten()
        .flat_map(|s| s.tokens().into_iter().flatten())
        .collect()
}

/// Gives dataset tokens missing from the model their pretrained vectors.
fn extend_from_glove(params: &mut ModelParams, table: &EmbeddingTable, samples: &[MemeSample]) -> Result<()> {
    for s in samples {
        for t in s.tokens().iter().flatten() {
            if let Some(row) = table.row(t) {
                params.add_token(t, row)?;
            }
        }
    }
    Ok(())
}

fn load_for_inference(run: &InferRun) -> Result<(ModelParams, Vec<memefuse_core::model::PreparedMeme>)> {
    let mut params = checkpoint::load(&run.checkpoint)?;
    let samples = data::load_dataset(&run.data)?;
    if let Some(g) = &run.glove {
        let table = load_glove_filtered(g, params.config.embed_dim, Some(&token_set([samples.as_slice()])))?;
        extend_from_glove(&mut params, &table, &samples)?;
    }
    let prepared = params.prepare_all(&samples)?;
    Ok((params, prepared))
}

pub fn execute(run: Run) -> Result<()> {
    match &run {
        Run::Train(r) => run_train(&run, r),
        Run::Evaluate(r) => {
            let (params, memes) = load_for_inference(r)?;
            let report = params.evaluate(&memes)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = &r.out {
                create_dir(out)?;
                write_json(&out.join("report.json"), &report)?;
                write_manifest(&run, &out.join(MANIFEST))?;
            }
            Ok(())
        }
        Run::Predict(r) => {
            let (params, memes) = load_for_inference(r)?;
            let out = r.out.as_deref().expect("predict has an output directory");
            create_dir(out)?;
            let path = out.join("predictions.jsonl");
            let mut w = jsonl_writer(&path)?;
            for m in &memes {
                let p = params.predict(m)?;
                io(&path, writeln!(w, "{}", serde_json::to_string(&p)?))?;
            }
            io(&path, w.flush())?;
            write_manifest(&run, &out.join(MANIFEST))?;
            log::info!("wrote {} predictions to {}", memes.len(), path.display());
            Ok(())
        }
        Run::ExportAttention(r) => {
            let (params, memes) = load_for_inference(r)?;
            let out = r.out.as_deref().expect("export has an output directory");
            create_dir(out)?;
            for m in &memes {
                write_json(&out.join(format!("{}.json", m.id)), &params.export_attention(m)?)?;
            }
            write_manifest(&run, &out.join(MANIFEST))
        }
        Run::Gradcheck(r) => {
            let report = gradcheck_suite(r.seed)?;
            let max = report.max_rel_error();
            let summary = serde_json::json!({
                "seed": r.seed,
                "step": GRADCHECK_STEP,
                "max_rel_error": max,
                "groups": report.by_group().into_iter().map(|(g, e)| (g, serde_json::Value::from(e))).collect::<serde_json::Map<_, _>>(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(out) = &r.out {
                create_dir(out)?;
                write_json(&out.join("gradcheck.json"), &summary)?;
                write_manifest(&run, &out.join(MANIFEST))?;
            }
            if max < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(Error::GradCheck {
                    max_rel_error: max,
                    tolerance: GRADCHECK_TOLERANCE,
                })
            }
        }
        Run::ConvertDataset(r) => {
            let (records, report) = data::convert_memotion_csv(&r.csv, &r.features_dir, &r.delimiter)?;
            if let Some(dir) = r.out.parent() {
                create_dir(dir)?;
            }
            data::write_records(&records, &r.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            let stem = r.out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
            write_manifest(&run, &r.out.with_file_name(format!("{stem}.manifest.json")))
        }
    }
}

fn run_train(run: &Run, r: &TrainRun) -> Result<()> {
    let train_set = data::load_dataset(&r.data)?;
    let val_set = r.val.as_deref().map(data::load_dataset).transpose()?;
    let test_set = r.test.as_deref().map(data::load_dataset).transpose()?;
    let extra: Vec<&[MemeSample]> = [&val_set, &test_set].into_iter().flatten().map(Vec::as_slice).collect();

    let vocab = corpus_vocab(&train_set);
    let table = match &r.glove {
        Some(g) => {
            let keep = token_set(std::iter::once(train_set.as_slice()).chain(extra.iter().copied()));
            Some(load_glove_filtered(g, r.model.embed_dim, Some(&keep))?)
        }
        None => None,
    };
    let mut params = init_params(&r.model, r.task, &vocab, table.as_ref(), r.train.seed)?;
    log::info!("{} parameters, vocabulary {}", params.parameter_count(), params.vocab.len());
    let train_memes = params.prepare_all(&train_set)?;
    if let Some(t) = &table {
        for s in &extra {
            extend_from_glove(&mut params, t, s)?;
        }
    }
    let val_memes = val_set.as_deref().map(|v| params.prepare_all(v)).transpose()?;
    let test_memes = test_set.as_deref().map(|v| params.prepare_all(v)).transpose()?;

    create_dir(&r.out)?;
    let log_path = r.out.join("train_log.jsonl");
    let mut log_w = jsonl_writer(&log_path)?;
    let mut log_err = None;
    let outcome = train::train(params, &train_memes, val_memes.as_deref(), r.train.clone(), |entry| {
        if log_err.is_none() {
            let line = serde_json::to_string(entry).map_err(Error::from).and_then(|l| io(&log_path, writeln!(log_w, "{l}")));
            log_err = line.err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    io(&log_path, log_w.flush())?;

    let ckpt = r.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        create_dir(dir)?;
    }
    checkpoint::save(&outcome.best, &ckpt)?;
    let vocab_path = r.out.join("vocab.tsv");
    io(&vocab_path, fs::write(&vocab_path, outcome.best.vocab.to_tsv()))?;

    let mut summary = serde_json::json!({
        "checkpoint": ckpt,
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "final_loss": outcome.history.last().map(|l| l.loss),
    });
    if let Some(test) = &test_memes {
        let report = outcome.best.evaluate(test)?;
        write_json(&r.out.join("test_report.json"), &report)?;
        summary["test"] = serde_json::to_value(&report)?;
    }
    write_manifest(run, &r.out.join(MANIFEST))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let run = Run::Train(TrainRun {
            task: Task::Quant,
            data: "/d/train.jsonl".into(),
            val: None,
            test: Some("/d/test.jsonl".into()),
            checkpoint: None,
            out: "/o".into(),
            glove: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        });
        let m = Manifest {
            code_version: "0.1.0".into(),
            seed: run.seed(),
            run: run.clone(),
        };
        let back: Manifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let Run::Train(r) = run.with_out("/elsewhere".into()) else { unreachable!() };
        assert_eq!(r.checkpoint_path(), Path::new("/elsewhere/model.ckpt"));
    }
}
