use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sme_core::data::{dataset_digest, read_jsonl, write_jsonl};
use sme_core::editors::Editor;
use sme_core::metrics::{report as fold_report, summarize, SmeReport};
use sme_core::model::{load_checkpoint, save_checkpoint, train_initial, TrainReport, TransformerModel};
use sme_core::pipeline::Lab;
use sme_core::report::{matrix_csv, memory_sweep_csv, steps_csv, summary_csv, write_atomic};
use sme_core::sme::{run_folds_each, SmeConfig, SmeRun};
use sme_core::{EditExample, Scored};

use crate::config::RunConfig;
use crate::{exit, EXIT_FOLDS, EXIT_HASH, EXIT_MISSING};

#[derive(Serialize, Deserialize)]
struct DataManifest {
    config_hash: String,
    setup_hash: String,
    /// File name → SHA-256 of its canonical JSONL.
    digests: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    config_hash: String,
    setup_hash: String,
    train_accuracy: f64,
    train_token_accuracy: f64,
    val_accuracy: f64,
    reached_floor: bool,
    train: TrainReport,
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
    setup_hash: String,
    config: RunConfig,
    editor: Editor,
    editor_name: String,
    memory_size: usize,
    folds_requested: usize,
    folds_completed: usize,
    failed: Vec<(usize, String)>,
}

fn data_dir(c: &RunConfig) -> PathBuf {
    c.out.join("data")
}

fn model_dir(c: &RunConfig) -> PathBuf {
    c.out.join("model")
}

fn runs_dir(c: &RunConfig) -> PathBuf {
    c.out.join("runs")
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(exit(
            EXIT_MISSING,
            format!("{} not found; run `smelab {stage}` first", path.display()),
        ))
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &(serde_json::to_string_pretty(value)? + "\n"))?;
    Ok(())
}

fn check_hash(found: &str, c: &RunConfig, what: &Path) -> Result<()> {
    if found != c.setup_hash() {
        return Err(exit(
            EXIT_HASH,
            format!(
                "{} was produced under a different task config (setup hash {found}, current {})",
                what.display(),
                c.setup_hash()
            ),
        ));
    }
    Ok(())
}

fn accuracy(model: &TransformerModel, items: &[EditExample]) -> Result<f64> {
    let scored: Vec<Scored> = items.iter().map(EditExample::scored).collect();
    let ok = model.correct(&scored)?;
    Ok(ok.iter().filter(|&&c| c).count() as f64 / ok.len().max(1) as f64)
}

pub fn gen(c: &RunConfig) -> Result<()> {
    let setup = c.setup();
    let (splits, test) = setup.data()?;
    let dir = data_dir(c);
    fs::create_dir_all(&dir)?;
    let mut digests = BTreeMap::new();
    for (name, set) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("edit", &splits.edit),
        ("d_tr", &splits.d_tr),
        ("pool", &splits.pool),
        ("test", &test),
    ] {
        let file = format!("{name}.jsonl");
        let tmp = dir.join(format!(".{file}.tmp"));
        write_jsonl(&tmp, set)?;
        fs::rename(&tmp, dir.join(&file))?;
        digests.insert(file, dataset_digest(set));
        println!("{name:>6}: {} examples", set.len());
    }
    write_json(
        &dir.join("manifest.json"),
        &DataManifest {
            config_hash: c.config_hash(),
            setup_hash: c.setup_hash(),
            digests,
        },
    )?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn data_manifest(c: &RunConfig) -> Result<DataManifest> {
    let path = data_dir(c).join("manifest.json");
    require(&path, "gen")?;
    let m: DataManifest = read_json(&path)?;
    check_hash(&m.setup_hash, c, &path)?;
    Ok(m)
}

fn check_digest(m: &DataManifest, file: &str, set: &[EditExample]) -> Result<()> {
    if m.digests.get(file).map(String::as_str) != Some(dataset_digest(set).as_str()) {
        return Err(exit(EXIT_HASH, format!("{file} does not match the data manifest")));
    }
    Ok(())
}

pub fn train(c: &RunConfig) -> Result<()> {
    let m = data_manifest(c)?;
    let setup = c.setup();
    let train = read_jsonl(&data_dir(c).join("train.jsonl"))?;
    let val = read_jsonl(&data_dir(c).join("val.jsonl"))?;
    check_digest(&m, "train.jsonl", &train)?;
    check_digest(&m, "val.jsonl", &val)?;

    let mut f0 = TransformerModel::new(setup.model.clone(), setup.model_seed)?;
    let scored: Vec<Scored> = train.iter().map(EditExample::scored).collect();
    let report = train_initial(&mut f0, &scored, &setup.train)?;
    let val_accuracy = accuracy(&f0, &val)?;

    let dir = model_dir(c);
    fs::create_dir_all(&dir)?;
    let tmp = dir.join(".f0.ckpt.tmp");
    save_checkpoint(&tmp, &f0, None)?;
    fs::rename(&tmp, dir.join("f0.ckpt"))?;
    write_json(
        &dir.join("manifest.json"),
        &ModelManifest {
            config_hash: c.config_hash(),
            setup_hash: c.setup_hash(),
            train_accuracy: report.accuracy,
            train_token_accuracy: report.token_accuracy,
            val_accuracy,
            reached_floor: report.reached_floor,
            train: report.clone(),
        },
    )?;
    println!(
        "f_0: train accuracy {:.3} (token {:.3}), val {:.3}, {} epochs",
        report.accuracy, report.token_accuracy, val_accuracy, report.epochs
    );
    if !report.reached_floor {
        eprintln!(
            "warning: train accuracy below the floor {:.2}",
            setup.train.accuracy_floor
        );
    }
    Ok(())
}

/// Writes one fold's outputs into a private staging directory, then moves
/// it into place.
fn write_fold(dir: &Path, run: &SmeRun, rep: &SmeReport) -> Result<()> {
    let stage = dir.join(format!(".fold-{}.tmp", run.fold));
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    fs::write(stage.join("report.json"), serde_json::to_string_pretty(rep)? + "\n")?;
    fs::write(stage.join("steps.csv"), steps_csv(std::slice::from_ref(run)))?;
    let mut records = String::new();
    for r in &run.records {
        records.push_str(&serde_json::to_string(r)?);
        records.push('\n');
    }
    fs::write(stage.join("records.jsonl"), records)?;
    let dst = dir.join(format!("fold-{}", run.fold));
    if dst.exists() {
        fs::remove_dir_all(&dst)?;
    }
    fs::rename(&stage, &dst)?;
    Ok(())
}

pub fn edit(c: &RunConfig) -> Result<()> {
    let data = data_manifest(c)?;
    let mpath = model_dir(c).join("manifest.json");
    let ckpt = model_dir(c).join("f0.ckpt");
    require(&mpath, "train")?;
    require(&ckpt, "train")?;
    let mm: ModelManifest = read_json(&mpath)?;
    check_hash(&mm.setup_hash, c, &mpath)?;

    let setup = c.setup();
    let editor = c.editor(&setup)?;
    let mut f0 = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?.model;
    if let Some(layer) = c.patched_layer {
        f0.set_patched_layer(layer)?;
    }
    let lab = Lab::with_model(&setup, f0)?;
    check_digest(&data, "edit.jsonl", &lab.splits.edit)?;
    check_digest(&data, "test.jsonl", &lab.test)?;

    let mut incomplete = Vec::new();
    for &cap in &c.memory_size {
        let name = format!("{}-m{cap}", editor.name());
        let dir = runs_dir(c).join(&name);
        fs::create_dir_all(&dir)?;
        let cfg = SmeConfig {
            memory_capacity: cap,
            memory_policy: c.memory_policy,
            seed: c.seed,
            traces: true,
        };
        let results = run_folds_each(
            &lab.f0,
            &editor,
            &lab.splits.edit,
            &lab.harvest,
            lab.ctx(),
            c.folds,
            &cfg,
        )?;
        let mut failed = Vec::new();
        for (i, res) in results.iter().enumerate() {
            match res.as_ref().map_err(|e| e.to_string()).and_then(|run| {
                let rep = fold_report(run).map_err(|e| e.to_string())?;
                write_fold(&dir, run, &rep).map_err(|e| e.to_string())?;
                Ok(rep)
            }) {
                Ok(rep) => println!(
                    "{name} fold {i}: {} edits, SR {} ER {} TrainR {} TestR {}",
                    rep.edits,
                    fmt(rep.sr),
                    fmt(rep.er),
                    fmt(rep.train_r),
                    fmt(rep.test_r)
                ),
                Err(e) => {
                    eprintln!("{name} fold {i} failed: {e}");
                    failed.push((i, e));
                }
            }
        }
        let completed = c.folds - failed.len();
        if !failed.is_empty() {
            incomplete.push(name.clone());
        }
        write_json(
            &dir.join("manifest.json"),
            &RunManifest {
                config_hash: c.config_hash(),
                setup_hash: c.setup_hash(),
                config: c.clone(),
                editor: editor.clone(),
                editor_name: editor.name(),
                memory_size: cap,
                folds_requested: c.folds,
                folds_completed: completed,
                failed,
            },
        )?;
    }
    if !incomplete.is_empty() {
        return Err(exit(EXIT_FOLDS, format!("incomplete folds in {}", incomplete.join(", "))));
    }
    Ok(())
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

pub fn report(c: &RunConfig) -> Result<()> {
    let runs = runs_dir(c);
    require(&runs, "edit")?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|d| d.join("manifest.json").exists());
    dirs.sort();
    if dirs.is_empty() {
        return Err(exit(EXIT_MISSING, format!("no runs under {}; run `smelab edit` first", runs.display())));
    }
    let out = c.out.join("report");
    fs::create_dir_all(&out)?;
    // editor → (capacity, summary) for the memory sweep.
    let mut sweeps: BTreeMap<String, Vec<(usize, sme_core::metrics::FoldSummary)>> = BTreeMap::new();
    for dir in dirs {
        let mpath = dir.join("manifest.json");
        let m: RunManifest = read_json(&mpath)?;
        check_hash(&m.setup_hash, c, &mpath)?;
        let name = dir.file_name().expect("run directory").to_string_lossy().into_owned();
        let mut reports = Vec::new();
        let mut steps = String::new();
        for fold in 0..m.folds_requested {
            let fdir = dir.join(format!("fold-{fold}"));
            if !fdir.exists() {
                continue;
            }
            let rep: SmeReport = read_json(&fdir.join("report.json"))?;
            let s = fs::read_to_string(fdir.join("steps.csv"))?;
            let mut lines = s.lines();
            let header = lines.next().unwrap_or_default();
            if steps.is_empty() {
                steps.push_str(header);
                steps.push('\n');
            }
            for l in lines {
                steps.push_str(l);
                steps.push('\n');
            }
            if let Some(a) = &rep.activation {
                write_atomic(&out.join(format!("activation-{name}-fold{fold}.csv")), &matrix_csv(&a.matrix))?;
            }
            reports.push(rep);
        }
        let summary = summarize(&reports);
        write_atomic(&out.join(format!("summary-{name}.csv")), &summary_csv(&reports, &summary))?;
        write_atomic(&out.join(format!("steps-{name}.csv")), &steps)?;
        let ms = |x: Option<sme_core::metrics::MeanStd>| {
            x.map(|m| format!("{:.3}±{:.3}", m.mean, m.std)).unwrap_or_else(|| "-".into())
        };
        println!(
            "{name:<24} folds {}/{}  SR {}  GR {}  ER {}  TrainR {}  TestR {}",
            reports.len(),
            m.folds_requested,
            ms(summary.sr),
            ms(summary.gr),
            ms(summary.er),
            ms(summary.train_r),
            ms(summary.test_r)
        );
        sweeps.entry(m.editor_name).or_default().push((m.memory_size, summary));
    }
    for (editor, mut rows) in sweeps {
        if rows.len() > 1 {
            rows.sort_by_key(|r| r.0);
            write_atomic(&out.join(format!("memory_sweep-{editor}.csv")), &memory_sweep_csv(&rows))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
