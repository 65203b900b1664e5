use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ecgnet::checkpoint;
use ecgnet::evaluation::{
    argmax, build_ensemble, cross_validate, ensemble_predict, majority_vote, ConfusionMatrix, CvOutcome, MetricsReport,
};
use ecgnet::network::Model;
use ecgnet::signal_io::{load_manifest, stratified_partition, Dataset, EcgRecord, Label, RecordLoader, SignalFormat};
use ecgnet::spectrogram::preprocess;
use ecgnet::training::{predict_probs, train_model, TrainHistory};
use serde::Serialize;

use crate::config::{CommandKind, RunConfig};
use crate::error::{write_file, CliError};

pub fn execute(run: &RunConfig) -> Result<(), CliError> {
    match run.command {
        CommandKind::Preprocess => run_preprocess(run),
        CommandKind::Train => run_train(run),
        CommandKind::Predict => run_predict(run),
        CommandKind::Cv => run_cv(run),
        CommandKind::Ensemble => run_ensemble(run),
    }
}

fn load(run: &RunConfig, manifest: &Path) -> Result<Dataset, CliError> {
    let loader = RecordLoader::new(run.paths.format);
    Ok(load_manifest(manifest, run.paths.data_root.as_deref(), &loader)?)
}

/// `run.json` beside a file output, or inside a directory output.
fn run_json_beside(file: &Path) -> PathBuf {
    file.parent().unwrap_or(Path::new(".")).join("run.json")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn history_jsonl(histories: &[TrainHistory]) -> String {
    let mut out = String::new();
    for h in histories {
        for e in &h.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
    }
    out
}

fn report_json<T: Serialize>(name: &str, value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("report serializes");
    v.as_object_mut()
        .expect("reports are objects")
        .insert("report".into(), serde_json::Value::String(name.into()));
    let mut line = serde_json::to_string(&v).expect("report serializes");
    line.push('\n');
    line
}

fn run_preprocess(run: &RunConfig) -> Result<(), CliError> {
    let ds = load(run, &run.paths.manifest)?;
    let dir = &run.paths.out;
    for r in &ds.records {
        let spec = preprocess(r, &run.train.preprocess)?;
        match run.spectrogram_format {
            SignalFormat::Text => write_file(&dir.join(format!("{}.csv", r.id)), spec.to_csv().as_bytes())?,
            SignalFormat::Bin => write_file(&dir.join(format!("{}.bin", r.id)), &spec.to_bin())?,
        }
    }
    run.write_json(&dir.join("run.json"))?;
    eprintln!("wrote {} spectrograms to {}", ds.len(), dir.display());
    Ok(())
}

fn read_fold_spec(path: &Path) -> Result<(BTreeSet<String>, BTreeSet<String>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let (mut train, mut val) = (BTreeSet::new(), BTreeSet::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once(',').map(|(id, s)| (id.trim(), s.trim())) {
            Some((id, "train")) => train.insert(id.to_string()),
            Some((id, "val")) => val.insert(id.to_string()),
            _ => {
                return Err(CliError::Data(format!(
                    "{} line {}: expected `id,train` or `id,val`, got {line:?}",
                    path.display(),
                    i + 1
                )))
            }
        };
    }
    Ok((train, val))
}

fn pick<'a>(ds: &'a Dataset, ids: &BTreeSet<String>) -> Result<Vec<&'a EcgRecord>, CliError> {
    if let Some(missing) = ids.iter().find(|id| ds.get(id).is_none()) {
        return Err(CliError::Data(format!("fold spec names unknown record {missing}")));
    }
    Ok(ds.subset(ids))
}

fn run_train(run: &RunConfig) -> Result<(), CliError> {
    let ds = load(run, &run.paths.manifest)?;
    let (train_ids, val_ids) = match &run.paths.fold_spec {
        Some(path) => read_fold_spec(path)?,
        None => {
            let folds = stratified_partition(&ds, run.folds, run.seed)?;
            (folds.train_ids(run.fold), folds.val_ids(run.fold).clone())
        }
    };
    let (train, val) = (pick(&ds, &train_ids)?, pick(&ds, &val_ids)?);
    eprintln!("training {} on {} records, validating on {}", run.model.arch, train.len(), val.len());
    let (model, histories) = train_model::<f32>(&run.model, &train, &val, &run.train)?;
    let out = &run.paths.out;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    checkpoint::save(&model, out)?;
    let log = run.paths.log.clone().unwrap_or_else(|| out.with_extension("train.jsonl"));
    write_file(&log, history_jsonl(&histories).as_bytes())?;
    run.write_json(&run_json_beside(out))?;
    let best = histories.iter().map(|h| h.best_val_f1_avg).fold(f64::NEG_INFINITY, f64::max);
    eprintln!("best validation F1_avg {best:.4}; checkpoint {}", out.display());
    Ok(())
}

fn run_predict(run: &RunConfig) -> Result<(), CliError> {
    let ds = load(run, &run.paths.manifest)?;
    let records: Vec<&EcgRecord> = ds.records.iter().collect();
    let mut per_model = Vec::new();
    for path in &run.paths.checkpoints {
        let mut model: Model<f32> = checkpoint::load(path)?;
        per_model.push(predict_probs(&mut model, &records, &run.train.preprocess, run.train.batch_size)?);
    }
    let mut out = String::from("id,label\n");
    for (i, r) in records.iter().enumerate() {
        let probs: Vec<Vec<f64>> = per_model.iter().map(|p| p[i].clone()).collect();
        let label = if probs.len() == 1 {
            Label::from_index(argmax(&probs[0])).expect("class index")
        } else {
            majority_vote(&probs).label
        };
        writeln!(out, "{},{}", r.id, label).unwrap();
    }
    write_file(&run.paths.out, out.as_bytes())?;
    run.write_json(&run_json_beside(&run.paths.out))?;
    eprintln!("wrote {} predictions to {}", records.len(), run.paths.out.display());
    Ok(())
}

fn cv_metrics(outcome: &CvOutcome) -> (String, String) {
    let mut text = String::new();
    let mut json = String::new();
    let n = outcome.predictions.len();
    text.push_str(&outcome.pooled.to_table(&format!("pooled out-of-fold, {n} records")));
    json.push_str(&report_json("pooled", &outcome.pooled));
    for f in &outcome.folds {
        text.push('\n');
        text.push_str(&f.report.to_table(&format!("fold {} ({} test records)", f.fold, f.n_test)));
        json.push_str(&report_json(&format!("fold{}", f.fold), &f.report));
    }
    let s = &outcome.summary;
    writeln!(
        text,
        "\nacross folds: F1_avg {:.1} +- {:.1}, overall accuracy {:.1} +- {:.1}",
        100.0 * s.f1_avg_mean,
        100.0 * s.f1_avg_sd,
        100.0 * s.overall_accuracy_mean,
        100.0 * s.overall_accuracy_sd
    )
    .unwrap();
    json.push_str(&report_json("fold_summary", s));
    (text, json)
}

fn run_cv(run: &RunConfig) -> Result<(), CliError> {
    let ds = load(run, &run.paths.manifest)?;
    eprintln!("{}-fold cross-validation of {} on {} labeled records", run.folds, run.model.arch, ds.labeled().count());
    let outcome = cross_validate::<f32>(&run.model, &run.train, &ds, run.folds, run.seed, run.fast)?;
    let dir = &run.paths.out;
    let (text, json) = cv_metrics(&outcome);
    write_file(&dir.join("metrics.txt"), text.as_bytes())?;
    write_file(&dir.join("metrics.jsonl"), json.as_bytes())?;
    let mut preds = String::from("id,fold,label,predicted\n");
    for p in &outcome.predictions {
        writeln!(preds, "{},{},{},{}", p.id, p.fold, p.truth, p.predicted).unwrap();
    }
    write_file(&dir.join("predictions.csv"), preds.as_bytes())?;
    for f in &outcome.folds {
        write_file(&dir.join(format!("fold{}.train.jsonl", f.fold)), history_jsonl(&f.histories).as_bytes())?;
    }
    run.write_json(&dir.join("run.json"))?;
    eprint!("{}", outcome.pooled.to_table("pooled"));
    Ok(())
}

fn run_ensemble(run: &RunConfig) -> Result<(), CliError> {
    let ds = load(run, &run.paths.manifest)?;
    eprintln!("training a {}-member {} ensemble on {} labeled records", run.members, run.model.arch, ds.labeled().count());
    let members = build_ensemble::<f32>(&run.model, &run.train, &ds, run.members, run.seed, run.fast)?;
    let dir = &run.paths.out;
    create_dir(dir)?;
    let mut text = String::new();
    let mut json = String::new();
    let mut models = Vec::with_capacity(members.len());
    for (i, mut m) in members.into_iter().enumerate() {
        checkpoint::save(&m.model, &dir.join(format!("member{i}.bin")))?;
        write_file(&dir.join(format!("member{i}.train.jsonl")), history_jsonl(&m.histories).as_bytes())?;
        let val = ds.subset(&m.val_ids);
        let report = ecgnet::training::evaluate(&mut m.model, &val, &run.train.preprocess, run.train.batch_size)?;
        text.push_str(&report.to_table(&format!("member {i} on its validation subset ({} records)", val.len())));
        text.push('\n');
        json.push_str(&report_json(&format!("member{i}_val"), &report));
        models.push(m.model);
    }

    let eval_ds;
    let eval = match &run.paths.eval_manifest {
        Some(path) => {
            eval_ds = load(run, path)?;
            &eval_ds
        }
        None => &ds,
    };
    let records: Vec<&EcgRecord> = eval.records.iter().collect();
    let votes = ensemble_predict(&mut models, &records, &run.train.preprocess, run.train.batch_size)?;
    let mut manifest = String::from("id,label,votes,truth\n");
    let mut cm = ConfusionMatrix::new();
    for (r, v) in records.iter().zip(&votes) {
        let ballots: Vec<String> = v.votes.iter().map(|l| l.to_string()).collect();
        let truth = r.label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(manifest, "{},{},{},{}", r.id, v.label, ballots.join(" "), truth).unwrap();
        if let Some(t) = r.label {
            cm.add(t, v.label);
        }
    }
    write_file(&dir.join("votes.csv"), manifest.as_bytes())?;
    if cm.total() > 0 {
        let report = MetricsReport::from_confusion(&cm);
        let scope = if run.paths.eval_manifest.is_some() { "evaluation manifest" } else { "training manifest (in-sample)" };
        text.push_str(&report.to_table(&format!("ensemble vote on the {scope}, {} records", cm.total())));
        json.push_str(&report_json("ensemble", &report));
    }
    write_file(&dir.join("metrics.txt"), text.as_bytes())?;
    write_file(&dir.join("metrics.jsonl"), json.as_bytes())?;
    run.write_json(&dir.join("run.json"))?;
    eprintln!("wrote {} checkpoints and votes for {} records to {}", models.len(), records.len(), dir.display());
    Ok(())
}
