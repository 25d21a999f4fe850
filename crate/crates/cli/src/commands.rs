use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iser_core::checkpoint::Checkpoint;
use iser_core::classifiers::{predict_sentence, Prediction};
use iser_core::data::{dataset_stats, load_chddi_json, load_span_json, Dataset};
use iser_core::encoder::{read_embedding_file, Vocab};
use iser_core::evaluation::evaluate;
use iser_core::interpret::attention_dumps;
use iser_core::model::Model;
use iser_core::training::EpochLoss;
use log::info;
use serde::Serialize;

use crate::config::{Dialect, RunConfig};
use crate::CliError;

fn dataset(config: &RunConfig, path: &Option<PathBuf>, key: &str) -> Result<Dataset, CliError> {
    let path = path
        .as_ref()
        .ok_or_else(|| CliError::new("CONFIG", format!("{key} is not set")))?;
    let ds = match config.dialect {
        Dialect::SpanJson => load_span_json(path)?,
        Dialect::Chddi => load_chddi_json(path)?,
    };
    info!("{}: {} sentences", path.display(), ds.sentences.len());
    Ok(ds)
}

fn write(config: &RunConfig, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::new("IO", format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::new("IO", format!("{}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable") + "\n"
}

fn load_model(config: &RunConfig) -> Result<Model, CliError> {
    let path = config.checkpoint_path();
    Ok(Checkpoint::load(&path)?.into_model()?)
}

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let data = dataset(config, &config.train_path, "train_path")?;
    let vocab = Vocab::build(data.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
    let mut model = Model::new(config.model(), vocab, data.catalog.clone(), config.seed)?;
    if let Some(path) = &config.embeddings {
        let vectors = read_embedding_file(path, config.dim)?;
        let n = model.net.encoder.load_embeddings(&mut model.params, &model.vocab, &vectors)?;
        info!("initialised {n} of {} embedding rows from {}", model.vocab.len(), path.display());
    }
    let mut trace: Vec<EpochLoss> = Vec::with_capacity(config.epochs);
    let report = iser_core::training::train(&mut model, &config.train(), &data.sentences, |row, _| {
        trace.push(*row);
        Ok(())
    })?;

    #[derive(Serialize)]
    struct Trace<'a> {
        config: serde_json::Value,
        steps: u64,
        epochs: &'a [EpochLoss],
    }
    let echo = config.echo();
    write(
        config,
        "loss_trace.json",
        &to_json(&Trace {
            config: echo.clone(),
            steps: report.steps,
            epochs: &trace,
        }),
    )?;
    write(config, "checkpoint.json", &Checkpoint::from_model(&model, echo).to_json())?;
    Ok(())
}

fn predict_all(config: &RunConfig, model: &Model, data: &Dataset) -> Result<Vec<Prediction>, CliError> {
    data.sentences
        .iter()
        .map(|s| predict_sentence(model, &s.tokens, config.threshold).map_err(CliError::from))
        .collect()
}

pub fn eval(config: &RunConfig) -> Result<(), CliError> {
    let model = load_model(config)?;
    let data = dataset(config, &config.eval_path, "eval_path")?;
    let pred = predict_all(config, &model, &data)?;
    let gold: Vec<Prediction> = data.sentences.iter().map(Prediction::from).collect();
    let report = evaluate(&gold, &pred, config.relation_mode)?;
    println!("{report}");

    #[derive(Serialize)]
    struct Out<'a> {
        config: serde_json::Value,
        #[serde(flatten)]
        report: &'a iser_core::evaluation::EvalReport,
    }
    write(
        config,
        "report.json",
        &to_json(&Out {
            config: config.echo(),
            report: &report,
        }),
    )?;
    write(config, "report.txt", &format!("{report}\n"))?;
    Ok(())
}

pub fn predict(config: &RunConfig) -> Result<(), CliError> {
    let model = load_model(config)?;
    let data = dataset(config, &config.eval_path, "eval_path")?;
    let pred = predict_all(config, &model, &data)?;

    #[derive(Serialize)]
    struct Item<'a> {
        id: &'a str,
        tokens: &'a [String],
        #[serde(flatten)]
        prediction: &'a Prediction,
    }
    #[derive(Serialize)]
    struct Out<'a> {
        config: serde_json::Value,
        predictions: Vec<Item<'a>>,
    }
    let predictions = data
        .sentences
        .iter()
        .zip(&pred)
        .map(|(s, p)| Item {
            id: &s.id,
            tokens: &s.tokens,
            prediction: p,
        })
        .collect();
    write(
        config,
        "predictions.json",
        &to_json(&Out {
            config: config.echo(),
            predictions,
        }),
    )?;
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn attn(config: &RunConfig) -> Result<(), CliError> {
    let model = load_model(config)?;
    let data = dataset(config, &config.eval_path, "eval_path")?;

    #[derive(Serialize)]
    struct Entry {
        id: String,
        tokens: Vec<String>,
        query_relations: String,
        query_entities: String,
        top_token_query_relations: String,
        top_token_query_entities: String,
    }
    let mut entries = Vec::new();
    for (i, s) in data.sentences.iter().filter(|s| !s.tokens.is_empty()).take(config.attn_limit).enumerate() {
        let (rel, ent) = attention_dumps(&model, &s.tokens)?;
        let stem = format!("attn_{i:04}_{}", file_stem(&s.id));
        let mut names = Vec::new();
        for d in [&rel, &ent] {
            let name = format!("{stem}_{}.csv", d.direction.as_str());
            write(config, &name, &d.to_csv()?)?;
            names.push(name);
        }
        entries.push(Entry {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            query_relations: names[0].clone(),
            query_entities: names[1].clone(),
            top_token_query_relations: s.tokens[rel.top_token()].clone(),
            top_token_query_entities: s.tokens[ent.top_token()].clone(),
        });
    }
    let manifest = serde_json::json!({ "config": config.echo(), "dumps": entries });
    write(config, "attn_manifest.json", &to_json(&manifest))?;
    Ok(())
}

pub fn stats(config: &RunConfig) -> Result<(), CliError> {
    let mut reports = BTreeMap::new();
    for (key, path) in [("train", &config.train_path), ("eval", &config.eval_path)] {
        if path.is_some() {
            let ds = dataset(config, path, key)?;
            let r = dataset_stats(&ds.sentences);
            println!("{key}: {}\n{r}", display(path.as_deref()));
            reports.insert(key, r);
        }
    }
    if reports.is_empty() {
        return Err(CliError::new("CONFIG", "neither train_path nor eval_path is set"));
    }
    let out = serde_json::json!({ "config": config.echo(), "datasets": reports });
    write(config, "stats.json", &to_json(&out))?;
    Ok(())
}

fn display(p: Option<&Path>) -> String {
    p.map(|p| p.display().to_string()).unwrap_or_default()
}
