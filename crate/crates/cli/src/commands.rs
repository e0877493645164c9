use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cyclone_core::checkpoint::{load_checkpoint, save_distributed, save_ensemble, Checkpoint};
use cyclone_core::dataset::synth::synth_generate_with;
use cyclone_core::dataset::{event_disjoint_split, export_dataset, load_dataset, write_labels, DatasetIndex, Image};
use cyclone_core::eval::{evaluate, EvalReport};
use cyclone_core::explain::{ensemble_heatmap, overlay_export, write_pgm};
use cyclone_core::models::{
    bootstrap_train_ensemble, expert_ranges, train_experts, DistributedModel, GlobalEnsemble, OverlapPolicy,
};
use cyclone_core::network::NetworkConfig;
use cyclone_core::predict::SpeedPredictor;
use cyclone_core::training::TrainReport;
use cyclone_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, Common, DataArgs, TrainArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        c.output = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(c)
}

fn apply_data(c: &mut RunConfig, d: &DataArgs) {
    if let Some(data) = &d.data {
        c.data = Some(data.clone());
    }
    if let Some(labels) = &d.labels {
        c.labels = Some(labels.clone());
    }
}

fn apply_train(c: &mut RunConfig, t: &TrainArgs) {
    apply_data(c, &t.data);
    if let Some(v) = &t.val_labels {
        c.val_labels = Some(v.clone());
    }
    if let Some(f) = t.val_fraction {
        c.val_fraction = f;
    }
    if let Some(preset) = &t.network {
        c.network = if preset == "reference" {
            NetworkConfig::reference()
        } else {
            NetworkConfig::small()
        };
    }
    if let Some(size) = t.input_size {
        c.network.input_size = size;
    }
    if let Some(e) = t.epochs {
        c.train.epochs = e;
    }
    if let Some(s) = t.steps_per_epoch {
        c.train.steps_per_epoch = Some(s);
    }
    if let Some(lr) = t.lr {
        c.train.adam.learning_rate = lr;
    }
    if let Some(p) = t.patience {
        c.train.early_stopping_patience = Some(p);
    }
}

fn load_labels(images: &Path, labels: &Path) -> Result<DatasetIndex> {
    let report = load_dataset(images, labels)?;
    if !report.rejected.is_empty() {
        eprintln!("warning: {} rows of {} rejected", report.rejected.len(), labels.display());
        for row in report.rejected.iter().take(10) {
            eprintln!("  {row}");
        }
    }
    Ok(report.index)
}

fn load_data(c: &RunConfig) -> Result<DatasetIndex> {
    let (images, labels) = c.dataset_paths()?;
    load_labels(&images, &labels)
}

/// Training set and optional validation set, recorded under `<out>/split`.
fn train_val(c: &RunConfig, out: &Path) -> Result<(DatasetIndex, Option<DatasetIndex>)> {
    let data = load_data(c)?;
    let (train, val) = if let Some(val_labels) = &c.val_labels {
        let (images, _) = c.dataset_paths()?;
        (data, Some(load_labels(&images, val_labels)?))
    } else if c.val_fraction > 0.0 {
        let (t, v) = event_disjoint_split(&data, c.val_fraction, c.seed)?;
        (t, Some(v))
    } else {
        (data, None)
    };
    let split = out.join("split");
    create_dir(&split)?;
    write_labels(&train, split.join("train.csv"))?;
    if let Some(v) = &val {
        write_labels(v, split.join("val.csv"))?;
    }
    eprintln!(
        "train: {} images, {} storms, {} distinct speeds; val: {}",
        train.len(),
        train.storm_count(),
        train.speed_count(),
        val.as_ref().map_or("none".to_string(), |v| format!("{} images", v.len()))
    );
    Ok((train, val))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn write_histories<'a>(dir: &Path, reports: impl IntoIterator<Item = (String, &'a TrainReport)>) -> Result<()> {
    create_dir(dir)?;
    for (name, report) in reports {
        report.write_csv(dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            common,
            n,
            size,
            noise,
            speed_min,
            speed_max,
        } => {
            let mut c = base_config(&common)?;
            c.synth.seed = common.seed.unwrap_or(c.synth.seed);
            c.synth.n = n.unwrap_or(c.synth.n);
            c.synth.size = size.unwrap_or(c.synth.size);
            c.synth.noise_std = noise.unwrap_or(c.synth.noise_std);
            c.synth.speed_min = speed_min.unwrap_or(c.synth.speed_min);
            c.synth.speed_max = speed_max.unwrap_or(c.synth.speed_max);
            c.validate()?;
            synth(&c)
        }
        Command::Split {
            common,
            data,
            val_fraction,
        } => {
            let mut c = base_config(&common)?;
            apply_data(&mut c, &data);
            c.val_fraction = val_fraction.unwrap_or(c.val_fraction);
            c.validate()?;
            split(&c)
        }
        Command::TrainGlobal { common, train, members } => {
            let mut c = base_config(&common)?;
            apply_train(&mut c, &train);
            c.members = members.unwrap_or(c.members);
            c.validate()?;
            train_global(&c)
        }
        Command::TrainExperts {
            common,
            train,
            gate,
            overlap,
        } => {
            let mut c = base_config(&common)?;
            apply_train(&mut c, &train);
            if let Some(o) = overlap {
                c.overlap = o.parse()?;
            }
            c.validate()?;
            train_experts_cmd(&c, &gate)
        }
        Command::Predict {
            common,
            data,
            model,
            images,
        } => {
            let mut c = base_config(&common)?;
            apply_data(&mut c, &data);
            predict(&c, &model, &images)
        }
        Command::Evaluate {
            common,
            data,
            model,
            oracle,
        } => {
            let mut c = base_config(&common)?;
            apply_data(&mut c, &data);
            evaluate_cmd(&c, model.as_deref(), oracle)
        }
        Command::Explain {
            common,
            model,
            image,
            layer,
        } => {
            let c = base_config(&common)?;
            explain(&c, &model, &image, layer as usize)
        }
    }
}

#[derive(Serialize)]
struct TruthRow<'a> {
    image_id: &'a str,
    wind_speed: f32,
    eye_row: f32,
    eye_col: f32,
    phase_step: u32,
}

fn synth(c: &RunConfig) -> Result<()> {
    let out = c.output()?;
    let data = synth_generate_with(&c.synth)?;
    export_dataset(&data.index, out)?;
    let mut w = csv_writer(&out.join("truth.csv"))?;
    for (s, t) in data.index.samples().iter().zip(&data.truth) {
        let (eye_row, eye_col) = t.eye_center(c.synth.size);
        w.serialize(TruthRow {
            image_id: &s.image_id,
            wind_speed: t.wind_speed,
            eye_row,
            eye_col,
            phase_step: t.phase_step,
        })?;
    }
    w.flush().map_err(io_err(out))?;
    c.record(out)?;
    let speeds = data.index.wind_speeds();
    let lo = speeds.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = speeds.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    println!(
        "wrote {} images ({}x{}) from {} storms, speeds {lo}..{hi} kt, to {}",
        data.index.len(),
        c.synth.size,
        c.synth.size,
        data.index.storm_count(),
        out.display()
    );
    Ok(())
}

fn split(c: &RunConfig) -> Result<()> {
    let out = c.output()?;
    let data = load_data(c)?;
    let (train, val) = event_disjoint_split(&data, c.val_fraction, c.seed)?;
    create_dir(out)?;
    write_labels(&train, out.join("train.csv"))?;
    write_labels(&val, out.join("val.csv"))?;
    c.record(out)?;
    println!(
        "train {} images / {} storms, val {} images / {} storms",
        train.len(),
        train.storm_count(),
        val.len(),
        val.storm_count()
    );
    Ok(())
}

#[derive(Serialize)]
struct GlobalSummary {
    members: usize,
    seeds: Vec<u64>,
    member_val_rmse: Vec<Option<f64>>,
    val: Option<EvalReport>,
}

fn train_global(c: &RunConfig) -> Result<()> {
    let out = c.output()?;
    create_dir(out)?;
    c.record(out)?;
    let (train, val) = train_val(c, out)?;
    let t = bootstrap_train_ensemble(&train, c.members, &c.hyper(), val.as_ref(), c.seed)?;
    save_ensemble(&t.ensemble, out.join("model"))?;
    write_histories(
        &out.join("history"),
        t.reports.iter().enumerate().map(|(i, r)| (format!("member_{i:02}"), r)),
    )?;
    let report = match &val {
        Some(v) => {
            let (mut r, _) = evaluate(&t.ensemble, v)?;
            r.model_kind = Some("ensemble".into());
            r.members = Some(t.ensemble.len());
            Some(r)
        }
        None => None,
    };
    let summary = GlobalSummary {
        members: t.ensemble.len(),
        seeds: t.ensemble.seeds().to_vec(),
        member_val_rmse: t.reports.iter().map(|r| r.final_val_rmse()).collect(),
        val: report,
    };
    write_json(&out.join("summary.json"), &summary)?;
    for (i, r) in summary.member_val_rmse.iter().enumerate() {
        if let Some(r) = r {
            println!("member {i:>2}: val rmse {r:.3}");
        }
    }
    if let Some(r) = &summary.val {
        println!("ensemble of {}: val rmse {:.3}", summary.members, r.rmse);
    }
    println!("checkpoint: {}", out.join("model").display());
    Ok(())
}

fn gate_ensemble(checkpoint: Checkpoint, seed: u64) -> Result<GlobalEnsemble> {
    match checkpoint {
        Checkpoint::Single(m) => GlobalEnsemble::from_models(vec![m], vec![seed]),
        Checkpoint::Ensemble(e) => Ok(e),
        Checkpoint::Distributed(d) => Ok(d.gate),
    }
}

#[derive(Serialize)]
struct ExpertSummary {
    overlap: OverlapPolicy,
    ranges: BTreeMap<String, cyclone_core::models::SpeedRange>,
    experts: Vec<String>,
    fallbacks: Vec<String>,
    val: Option<EvalReport>,
}

fn train_experts_cmd(c: &RunConfig, gate: &Path) -> Result<()> {
    let out = c.output()?;
    let gate = gate_ensemble(load_checkpoint(gate)?, c.seed)?;
    if gate.input_size() != c.network.input_size {
        eprintln!(
            "note: gate input size {} differs from expert input size {}",
            gate.input_size(),
            c.network.input_size
        );
    }
    create_dir(out)?;
    c.record(out)?;
    let (train, val) = train_val(c, out)?;
    let max = train.max_speed().ok_or_else(|| Error::Data("empty training set".into()))? as f64;
    let ranges: BTreeMap<_, _> = expert_ranges(max, c.overlap).into_iter().collect();
    let t = train_experts(&train, &ranges, &c.hyper(), val.as_ref(), c.seed)?;
    if !t.missing.is_empty() {
        let names: Vec<&str> = t.missing.iter().map(|c| c.name()).collect();
        eprintln!(
            "warning: no training images for {}; these categories fall back to the gate",
            names.join(", ")
        );
    }
    write_histories(&out.join("history"), t.reports.iter().map(|(cat, r)| (format!("expert_{}", cat.name()), r)))?;
    let model = DistributedModel::new(gate, t.experts, ranges.clone(), c.overlap)?;
    save_distributed(&model, out.join("model"))?;
    let report = match &val {
        Some(v) => {
            let (mut r, _) = evaluate(&model, v)?;
            r.model_kind = Some("distributed".into());
            r.members = Some(model.gate.len());
            Some(r)
        }
        None => None,
    };
    let summary = ExpertSummary {
        overlap: c.overlap,
        ranges: ranges.iter().map(|(k, v)| (k.name().to_string(), *v)).collect(),
        experts: model.experts.keys().map(|k| k.name().to_string()).collect(),
        fallbacks: model.fallbacks().iter().map(|k| k.name().to_string()).collect(),
        val: report,
    };
    write_json(&out.join("summary.json"), &summary)?;
    for (cat, range) in &ranges {
        let status = if model.experts.contains_key(cat) { "trained" } else { "fallback" };
        println!("{:<3} {range:<16} {status}", cat.name());
    }
    if let Some(r) = &summary.val {
        println!("distributed model: val rmse {:.3}", r.rmse);
    }
    println!("checkpoint: {}", out.join("model").display());
    Ok(())
}

fn predict(c: &RunConfig, model: &Path, paths: &[PathBuf]) -> Result<()> {
    let checkpoint = load_checkpoint(model)?;
    let mut ids = Vec::new();
    let mut images = Vec::new();
    if c.data.is_some() {
        let data = load_data(c)?;
        for s in data.samples() {
            ids.push(s.image_id.clone());
            images.push(s.image.as_ref().clone());
        }
    }
    for p in paths {
        ids.push(p.display().to_string());
        images.push(Image::load(p)?);
    }
    if images.is_empty() {
        return Err(Error::Config("nothing to predict: give --data or image paths".into()));
    }
    let refs: Vec<&Image> = images.iter().collect();
    let sink: Box<dyn Write> = match &c.output {
        Some(dir) => {
            create_dir(dir)?;
            let path = dir.join("predictions.csv");
            Box::new(fs::File::create(&path).map_err(io_err(&path))?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    match &checkpoint {
        Checkpoint::Distributed(d) => {
            w.write_record(["image_id", "predicted_speed", "gate_speed", "category", "expert_speed", "fallback"])?;
            for (id, r) in ids.iter().zip(d.moe_predict(&refs)?) {
                w.write_record([
                    id.clone(),
                    r.final_speed.to_string(),
                    r.gate_speed.to_string(),
                    r.category.name().to_string(),
                    r.expert_speed.map(|v| v.to_string()).unwrap_or_default(),
                    r.fallback.to_string(),
                ])?;
            }
        }
        other => {
            w.write_record(["image_id", "predicted_speed"])?;
            for (id, v) in ids.iter().zip(other.predict_speeds(&refs)?) {
                w.write_record([id.clone(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: PathBuf::from("predictions"),
        source: e,
    })?;
    if let Some(dir) = &c.output {
        c.record(dir)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RoutingRow<'a> {
    image_id: &'a str,
    wind_speed: f32,
    gate_speed: f32,
    category: &'a str,
    expert_speed: Option<f32>,
    final_speed: f32,
    fallback: bool,
}

fn evaluate_cmd(c: &RunConfig, model: Option<&Path>, oracle: bool) -> Result<()> {
    let out = c.output()?;
    let data = load_data(c)?;
    create_dir(out)?;
    let truth: Vec<f64> = data.wind_speeds().iter().map(|&v| v as f64).collect();
    let images: Vec<&Image> = data.samples().iter().map(|s| s.image.as_ref()).collect();
    let (predictions, kind, members) = if oracle {
        (truth.iter().map(|&v| v as f32).collect::<Vec<_>>(), "oracle", None)
    } else {
        let path = model.ok_or_else(|| Error::Config("--model is required".into()))?;
        let checkpoint = load_checkpoint(path)?;
        let predictions = match &checkpoint {
            Checkpoint::Distributed(d) => {
                let routes = d.moe_predict(&images)?;
                let mut w = csv_writer(&out.join("routing.csv"))?;
                for (s, r) in data.samples().iter().zip(&routes) {
                    w.serialize(RoutingRow {
                        image_id: &s.image_id,
                        wind_speed: s.wind_speed,
                        gate_speed: r.gate_speed,
                        category: r.category.name(),
                        expert_speed: r.expert_speed,
                        final_speed: r.final_speed,
                        fallback: r.fallback,
                    })?;
                }
                w.flush().map_err(io_err(out))?;
                routes.iter().map(|r| r.final_speed).collect()
            }
            other => other.predict_speeds(&images)?,
        };
        (predictions, checkpoint.kind(), Some(checkpoint.member_count()))
    };
    let yhat: Vec<f64> = predictions.iter().map(|&v| v as f64).collect();
    let mut report = EvalReport::from_predictions(&yhat, &truth)?;
    report.model_kind = Some(kind.into());
    report.members = members;
    write_json(&out.join("report.json"), &report)?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table).map_err(io_err(out))?;
    let mut w = csv_writer(&out.join("predictions.csv"))?;
    w.write_record(["image_id", "wind_speed", "predicted_speed"])?;
    for (s, p) in data.samples().iter().zip(&predictions) {
        w.write_record([s.image_id.clone(), s.wind_speed.to_string(), p.to_string()])?;
    }
    w.flush().map_err(io_err(out))?;
    c.record(out)?;
    print!("{table}");
    Ok(())
}

fn explain(c: &RunConfig, model: &Path, image: &Path, layer: usize) -> Result<()> {
    let out = c.output()?;
    let ensemble = gate_ensemble(load_checkpoint(model)?, c.seed)?;
    let img = Image::load(image)?;
    let maps = ensemble_heatmap(&ensemble, &img, layer)?;
    create_dir(out)?;
    write_pgm(out.join("original.pgm"), img.size(), img.pixels())?;
    for (i, h) in maps.members.iter().enumerate() {
        overlay_export(&img, h, out, &format!("member_{i:02}"))?;
    }
    overlay_export(&img, &maps.median, out, "median")?;
    c.record(out)?;
    let speed = ensemble.predict_speeds(&[&img])?[0];
    let (r, col) = maps.median.argmax();
    println!(
        "predicted {speed:.1} kt; layer {layer} median heatmap peaks at row {r}, col {col}; {} member maps in {}",
        maps.members.len(),
        out.display()
    );
    Ok(())
}
