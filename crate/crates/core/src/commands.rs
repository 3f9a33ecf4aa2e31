//! Library side of the `ttlstm` subcommands.

use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bench::bench_forward;
use crate::contract::{cost_model, efficiency_gain};
use crate::data::{encode_stream, make_batches, CorpusSplits, Vocab};
use crate::distill::{teacher_covariances, DataCovariance, DistillMode, TeacherWeights};
use crate::error::{Error, Result};
use crate::model_file::{sha256_hex, ModelFile, VocabRef};
use crate::nn::{LayerSpec, ModelConfig, TTLstmModel};
use crate::report::{append_records, RunRecord};
use crate::train::{evaluate, train_model, Corpus, EpochReport, RunConfig, Teacher, TrainOutcome};
use crate::ttrain::{RankChain, ShapeFactorization};

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())[..16].to_string()
}

/// Run log written next to a model file.
pub fn records_path_for(model: &Path) -> PathBuf {
    let mut name = model.file_name().unwrap_or_default().to_os_string();
    name.push(".runs.csv");
    model.with_file_name(name)
}

fn model_hash(config: &ModelConfig) -> String {
    config_hash(&toml::to_string(config).unwrap_or_default())
}

/// Representation label and largest inner rank over both gate stacks.
pub fn describe(model: &TTLstmModel) -> (String, usize) {
    let cfg = model.config();
    let label = if cfg.w_x.kind == cfg.w_h.kind {
        cfg.w_x.kind.to_string()
    } else {
        format!("{}+{}", cfg.w_x.kind, cfg.w_h.kind)
    };
    let rank = [&cfg.w_x, &cfg.w_h]
        .iter()
        .filter_map(|s| s.ranks.as_ref().map(RankChain::max_rank))
        .max()
        .unwrap_or(0);
    (label, rank)
}

fn base_record(command: &str, model: &TTLstmModel, hash: &str) -> Result<RunRecord> {
    let (representation, rank) = describe(model);
    Ok(RunRecord {
        config_hash: hash.to_string(),
        representation,
        rank,
        compression_rate: model.compression_rate()?,
        ..RunRecord::new(command)
    })
}

/// Loads a model and the vocabulary its manifest references.
pub fn load_model_with_vocab(path: &Path) -> Result<(TTLstmModel, Vocab)> {
    let file = ModelFile::load(path)?;
    let model = file.to_model()?;
    let vref = file
        .manifest()
        .vocab
        .clone()
        .ok_or_else(|| Error::config(format!("{} references no vocabulary", path.display())))?;
    let vpath = path.with_file_name(&vref.file);
    let text = std::fs::read_to_string(&vpath)
        .map_err(|e| Error::config(format!("cannot read vocabulary {}: {e}", vpath.display())))?;
    if sha256_hex(text.as_bytes()) != vref.sha256 {
        return Err(Error::config(format!("vocabulary {} does not match its digest", vpath.display())));
    }
    let vocab = Vocab::from_tsv(&text)?;
    if vocab.len() != vref.size || vocab.len() != model.config().vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok((model, vocab))
}

/// Writes the vocabulary under a content-addressed name next to `model`.
fn save_vocab(model: &Path, vocab: &Vocab) -> Result<VocabRef> {
    let text = vocab.to_tsv();
    let sha256 = sha256_hex(text.as_bytes());
    let file = format!("vocab-{}.tsv", &sha256[..16]);
    std::fs::write(model.with_file_name(&file), &text)?;
    Ok(VocabRef {
        file,
        sha256,
        size: vocab.len(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub teacher: Option<PathBuf>,
    pub covariance: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub records: Vec<RunRecord>,
    pub records_path: PathBuf,
    pub test_perplexity: Option<f64>,
}

/// Trains per the run config, writes the best model with its vocabulary and
/// appends one record per epoch and split.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut run = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    let seed = run.train.seed;
    let splits = CorpusSplits::load(&args.corpus)?;
    let (corpus, teacher_model) = match &args.teacher {
        Some(path) => {
            let (teacher, vocab) = load_model_with_vocab(path)?;
            (Corpus::with_vocab(&splits, vocab), Some(teacher))
        }
        None => (Corpus::build(&splits, run.data.max_vocab)?, None),
    };
    run.model.vocab_size = corpus.vocab.len();
    let hash = config_hash(&run.to_toml()?);
    let model = TTLstmModel::new(run.model.clone(), seed)?;

    let teacher = match &teacher_model {
        None => None,
        Some(t) => {
            let weights = TeacherWeights::from_model(t, args.teacher.as_ref().unwrap().display().to_string())?;
            weights.check_compatible(&model)?;
            let covariances = if run.train.distill.mode == DistillMode::Kda {
                Some(match &args.covariance {
                    Some(p) => ModelFile::load(p)?.to_covariances()?,
                    None => teacher_covariances(&t.freeze()?, &corpus.train, run.model.batch)?,
                })
            } else {
                None
            };
            Some(Teacher::new(weights, covariances.as_ref().map(|(x, h)| (x, h))))
        }
    };

    let records_path = args.records.clone().unwrap_or_else(|| records_path_for(&args.out));
    let base = RunRecord {
        distill: run.train.distill.mode.to_string(),
        lambda: run.train.distill.lambda,
        ..base_record("train", &model, &hash)?
    };
    let mut records = Vec::new();
    let mut on_epoch = |r: &EpochReport| {
        records.push(RunRecord {
            epoch: Some(r.epoch),
            split: "train".into(),
            perplexity: Some(r.train_perplexity),
            ..base.clone()
        });
        if let Some(v) = r.valid_perplexity {
            records.push(RunRecord {
                epoch: Some(r.epoch),
                split: "valid".into(),
                perplexity: Some(v),
                ..base.clone()
            });
        }
    };
    let result = train_model(
        model,
        &corpus.train,
        corpus.valid.as_deref(),
        &run.train,
        teacher.as_ref(),
        &mut on_epoch,
    );
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if matches!(e, Error::Numeric(_)) {
                records.push(RunRecord {
                    status: "numeric-error".into(),
                    ..base.clone()
                });
            }
            append_records(&records_path, &records)?;
            return Err(e);
        }
    };

    let vref = save_vocab(&args.out, &corpus.vocab)?;
    ModelFile::from_model(&outcome.model, seed, Some(vref), Some(run.train.clone())).save(&args.out)?;
    info!("wrote {}", args.out.display());

    let test_perplexity = match &corpus.test {
        Some(ids) => {
            let ppl = evaluate(&outcome.model.freeze()?, ids, run.model.unroll)?;
            records.push(RunRecord {
                epoch: Some(outcome.best_epoch),
                split: "test".into(),
                perplexity: Some(ppl),
                ..base.clone()
            });
            Some(ppl)
        }
        None => None,
    };
    append_records(&records_path, &records)?;
    Ok(TrainSummary {
        outcome,
        records,
        records_path,
        test_perplexity,
    })
}

/// Test perplexity of a saved model on the test split of `corpus` (or the
/// whole file).
pub fn cmd_eval(model_path: &Path, corpus: &Path, records: Option<&Path>) -> Result<RunRecord> {
    let (model, vocab) = load_model_with_vocab(model_path)?;
    let splits = CorpusSplits::load(corpus)?;
    let ids = encode_stream(splits.evaluation_text(), &vocab);
    let ppl = evaluate(&model.freeze()?, &ids, model.config().unroll)?;
    let record = RunRecord {
        split: if splits.test.is_some() { "test" } else { "file" }.into(),
        perplexity: Some(ppl),
        ..base_record("eval", &model, &model_hash(model.config()))?
    };
    if let Some(p) = records {
        append_records(p, std::slice::from_ref(&record))?;
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub model: PathBuf,
    pub corpus: Option<PathBuf>,
    pub runs: usize,
    pub discard: usize,
    pub threads: usize,
    /// Hold every gate stack as a dense matrix.
    pub dense: bool,
    pub records: Option<PathBuf>,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            model: PathBuf::new(),
            corpus: None,
            runs: 12,
            discard: 2,
            threads: 1,
            dense: false,
            records: None,
        }
    }
}

/// First `batch x unroll` window of the corpus, or a fixed token pattern
/// without one.
fn bench_inputs(model: &TTLstmModel, corpus: Option<&Path>, vocab: Option<&Vocab>) -> Result<Array2<usize>> {
    let cfg = model.config();
    match (corpus, vocab) {
        (Some(path), Some(vocab)) => {
            let splits = CorpusSplits::load(path)?;
            let ids = encode_stream(splits.evaluation_text(), vocab);
            let stream = make_batches(&ids, cfg.batch, cfg.unroll)?;
            Ok(stream.window(0).expect("at least one window").inputs)
        }
        _ => Ok(Array2::from_shape_fn((cfg.batch, cfg.unroll), |(b, t)| {
            (b * 7919 + t * 104_729) % cfg.vocab_size
        })),
    }
}

/// Times `runs` forward passes over one window and keeps all but the first
/// `discard`.
pub fn cmd_bench(args: &BenchArgs) -> Result<RunRecord> {
    if args.runs <= args.discard {
        return Err(Error::config(format!(
            "runs ({}) must exceed discard ({})",
            args.runs, args.discard
        )));
    }
    let (model, vocab) = match &args.corpus {
        Some(_) => {
            let (m, v) = load_model_with_vocab(&args.model)?;
            (m, Some(v))
        }
        None => (ModelFile::load(&args.model)?.to_model()?, None),
    };
    if args.threads > 1 {
        warn!("running with {} threads; timings are not comparable to single-thread runs", args.threads);
    }
    let inputs = bench_inputs(&model, args.corpus.as_deref(), vocab.as_ref())?;
    let (stats, _) = bench_forward(&model, inputs.view(), args.runs, args.discard, args.threads.max(1), args.dense)?;
    let mut record = RunRecord {
        split: "bench".into(),
        mean_seconds: Some(stats.mean),
        sd_seconds: Some(stats.sd),
        measurements: Some(stats.measurements.len()),
        ..base_record("bench", &model, &model_hash(model.config()))?
    };
    if args.dense {
        record.representation = format!("{} as dense", record.representation);
    }
    if let Some(p) = &args.records {
        append_records(p, std::slice::from_ref(&record))?;
    }
    Ok(record)
}

/// One row of the cost report printed by `info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoRow {
    pub gate: String,
    pub representation: String,
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub m: usize,
    pub max_rank: usize,
    pub storage: usize,
    pub storage_bound: usize,
    pub precompute_ops: u64,
    pub matvec_ops: u64,
    pub op_bound: u64,
    pub compression_rate: f64,
    pub efficiency_gain: Option<f64>,
    pub s_eig_min: Option<f64>,
    pub s_eig_max: Option<f64>,
}

fn info_row(gate: &str, spec: &LayerSpec, rows: usize, cols: usize) -> Result<InfoRow> {
    let spec = spec.resolve(rows, cols)?;
    let base = InfoRow {
        gate: gate.to_string(),
        representation: spec.kind.to_string(),
        rows,
        cols,
        n: 0,
        m: 0,
        max_rank: 0,
        storage: rows * cols,
        storage_bound: rows * cols,
        precompute_ops: 0,
        matvec_ops: (rows * cols) as u64,
        op_bound: (rows * cols) as u64,
        compression_rate: 1.0,
        efficiency_gain: None,
        s_eig_min: None,
        s_eig_max: None,
    };
    let Some(ranks) = &spec.ranks else {
        return Ok(base);
    };
    let mut fact = ShapeFactorization::new(spec.row_dims.clone(), spec.col_dims.clone())?;
    if let Some(p) = &spec.col_permutation {
        fact = fact.with_col_permutation(p.clone())?;
    }
    let c = cost_model(&fact, ranks)?;
    Ok(InfoRow {
        n: c.n,
        m: c.m,
        max_rank: c.max_rank,
        storage: c.storage,
        storage_bound: c.storage_bound,
        precompute_ops: c.precompute_ops,
        matvec_ops: c.matvec_ops,
        op_bound: c.op_bound(),
        compression_rate: c.compression_rate,
        efficiency_gain: efficiency_gain(&fact).ok(),
        ..base
    })
}

/// Cost rows for both gate stacks of `config` plus a combined row.
pub fn info_rows(config: &ModelConfig) -> Result<Vec<InfoRow>> {
    let h = config.hidden;
    let x = info_row("w_x", &config.w_x, 4 * h, config.embed)?;
    let hh = info_row("w_h", &config.w_h, 4 * h, h)?;
    let full = x.rows * x.cols + hh.rows * hh.cols;
    let storage = x.storage + hh.storage;
    let kind = |r: &InfoRow| r.representation.clone();
    let total = InfoRow {
        gate: "total".into(),
        representation: if x.representation == hh.representation { kind(&x) } else { format!("{}+{}", kind(&x), kind(&hh)) },
        rows: 4 * h,
        cols: config.embed + h,
        n: 0,
        m: 0,
        max_rank: x.max_rank.max(hh.max_rank),
        storage,
        storage_bound: x.storage_bound + hh.storage_bound,
        precompute_ops: x.precompute_ops + hh.precompute_ops,
        matvec_ops: x.matvec_ops + hh.matvec_ops,
        op_bound: x.op_bound + hh.op_bound,
        compression_rate: full as f64 / storage as f64,
        efficiency_gain: None,
        s_eig_min: None,
        s_eig_max: None,
    };
    Ok(vec![x, hh, total])
}

#[derive(Debug, Clone, Default)]
pub struct InfoArgs {
    pub config: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Covariance file to report eigenvalue extremes for.
    pub covariance: Option<PathBuf>,
    /// With `model`: collect the teacher's input covariances over the
    /// training split and write them to `out`.
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct InfoReport {
    pub rows: Vec<InfoRow>,
    pub csv: String,
}

/// Cost report of a config or model, optionally with covariance
/// eigenvalue extremes.
pub fn cmd_info(args: &InfoArgs) -> Result<InfoReport> {
    let (config, model_path) = match (&args.config, &args.model) {
        (Some(c), None) => (RunConfig::load(c)?.model, None),
        (None, Some(m)) => (
            ModelFile::load(m)?
                .manifest()
                .model
                .clone()
                .ok_or_else(|| Error::config("file holds no model"))?,
            Some(m),
        ),
        _ => return Err(Error::config("info needs exactly one of --config and --model")),
    };
    let mut rows = info_rows(&config)?;

    let mut covariances: Option<(DataCovariance, DataCovariance)> = None;
    if let (Some(model), Some(corpus)) = (model_path, &args.corpus) {
        let out = args
            .out
            .as_ref()
            .ok_or_else(|| Error::config("collecting covariances needs --out"))?;
        let (teacher, vocab) = load_model_with_vocab(model)?;
        let splits = CorpusSplits::load(corpus)?;
        let ids = encode_stream(&splits.train, &vocab);
        let (x, h) = teacher_covariances(&teacher.freeze()?, &ids, teacher.config().batch)?;
        ModelFile::from_covariances(&x, &h, None)?.save(out)?;
        info!("wrote covariances over {} samples to {}", x.count, out.display());
        covariances = Some((x, h));
    }
    if let Some(p) = &args.covariance {
        covariances = Some(ModelFile::load(p)?.to_covariances()?);
    }
    if let Some((x, h)) = &covariances {
        for (row, c) in rows.iter_mut().zip([x, h]) {
            let (lo, hi) = c.eigen_extremes();
            row.s_eig_min = Some(lo);
            row.s_eig_max = Some(hi);
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
        .expect("csv output is UTF-8");
    Ok(InfoReport { rows, csv })
}
