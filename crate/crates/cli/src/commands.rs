use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndcr::data::{self, DatasetHeader, Instance};
use ndcr::gradcheck::{self, CheckConfig, Module};
use ndcr::{checkpoint, evaluate, Ablation, Error, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{EvalArgs, Failure, GenArgs, GradcheckArgs, InspectArgs, TrainArgs};

/// Run description written next to every checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: u64,
    pub train_config: TrainConfig,
    /// Model configuration the checkpoint was trained with.
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub data_config_hash: u64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure {
        code: 2,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Instance>), Failure> {
    data::read_dataset(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

pub fn gen(a: GenArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(a.config.as_deref())?.gen;
    if let Some(v) = a.d {
        cfg.d = v;
    }
    if let Some(v) = a.candidates {
        cfg.candidates = v;
    }
    if let Some(v) = a.attributes {
        cfg.attributes = v;
    }
    if let Some(v) = a.count_weights {
        cfg.count_weights = v;
    }
    if let Some(v) = a.negation_prob {
        cfg.negation_prob = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.encoder_seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let instances = data::generate_dataset(a.seed, a.count, &cfg)?;
    let json = serde_json::to_string(&cfg).expect("config serializes");
    let bytes = data::write_dataset_bytes(&json, cfg.hash(), &instances)?;
    write_file(&a.out, &bytes)?;
    let mut counts = vec![0usize; cfg.max_count()];
    for inst in &instances {
        counts[inst.count - 1] += 1;
    }
    let summary = json!({
        "path": a.out.display().to_string(),
        "instances": instances.len(),
        "master_seed": a.seed,
        "count_distribution": counts,
        "config_hash": cfg.hash(),
        "config": cfg,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let run = RunConfig::load(a.config.as_deref())?;
    let mut cfg = run.train_config();
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.optimizer.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.optimizer.max_epochs = v;
    }
    if let Some(v) = a.dropout {
        cfg.optimizer.dropout = v;
    }
    if let Some(v) = a.seed {
        cfg.optimizer.seed = v;
    }
    if let Some(v) = a.ablation {
        cfg.ablation = v;
    }
    let (train_header, train_set) = read_dataset(&a.data)?;
    let (val_header, val_set) = read_dataset(&a.val)?;
    if train_header.d != val_header.d {
        return Err(Error::Dimension(format!(
            "training data has d={}, validation data has d={}",
            train_header.d, val_header.d
        ))
        .into());
    }
    cfg.model.d = train_header.d;
    cfg.validate()?;
    let hash = cfg.hash();
    println!(
        "{}",
        json!({ "effective_config": &cfg, "config_hash": hash, "parameters": cfg.ndcr()?.init_params::<f32>(0)?.numel() })
    );
    if a.dry_run {
        return Ok(());
    }

    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    });
    let file = File::create(&metrics_path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot write {}: {e}", metrics_path.display()),
    })?;
    let mut metrics = BufWriter::new(file);
    let mut write_err = None;
    let started = Instant::now();
    let outcome = ndcr::train(&train_set, &val_set, &cfg, |m| {
        let line = serde_json::to_string(m).expect("json");
        println!("{line}  ({:.0}s)", started.elapsed().as_secs_f64());
        if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Failure {
            code: 2,
            message: format!("cannot write {}: {e}", metrics_path.display()),
        });
    }

    write_file(&a.out, &checkpoint::encode(&outcome.best))?;
    let model = cfg.effective_model();
    let mut report = evaluate(&val_set, &outcome.best, &model, &cfg.loss, cfg.ablation)?;
    report.config_hash = hash;
    writeln!(metrics, "{}", json!({ "final_report": report }))
        .and_then(|_| metrics.flush())
        .map_err(|e| Failure {
            code: 2,
            message: format!("cannot write {}: {e}", metrics_path.display()),
        })?;
    let sidecar = Sidecar {
        config_hash: hash,
        model,
        ablation: cfg.ablation,
        train_config: cfg,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        data_config_hash: train_header.config_hash,
    };
    write_file(
        &sidecar_path(&a.out),
        serde_json::to_string_pretty(&sidecar)
            .expect("json")
            .as_bytes(),
    )?;
    println!(
        "{}",
        json!({ "checkpoint": a.out.display().to_string(), "best_epoch": outcome.best_epoch,
                "best_val_accuracy": outcome.best_val_accuracy, "config_hash": hash })
    );
    Ok(())
}

fn load_sidecar(checkpoint: &Path) -> Result<Sidecar, Failure> {
    let path = sidecar_path(checkpoint);
    let text = fs::read_to_string(&path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read run description {}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let store = checkpoint::load(&a.checkpoint)?;
    let sidecar = load_sidecar(&a.checkpoint)?;
    let (header, instances) = read_dataset(&a.data)?;
    if header.d != sidecar.model.d {
        return Err(Error::Dimension(format!(
            "checkpoint has d={}, dataset {} has d={}",
            sidecar.model.d,
            a.data.display(),
            header.d
        ))
        .into());
    }
    let ablation = a.ablation.unwrap_or(sidecar.ablation);
    let mut report = evaluate(
        &instances,
        &store,
        &sidecar.model,
        &sidecar.train_config.loss,
        ablation,
    )?;
    report.config_hash = sidecar.config_hash;
    print!("{}", report.table());
    let json = serde_json::to_string_pretty(&report).expect("json");
    match &a.out {
        Some(path) => write_file(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be >= 1"));
    }
    let cfg = CheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        ..CheckConfig::default()
    };
    let modules = if a.module.is_empty() {
        Module::ALL.to_vec()
    } else {
        a.module
    };
    let started = Instant::now();
    let mut failed = Vec::new();
    for module in modules {
        let mut worst = 0.0f64;
        let (mut entries, mut skipped) = (0, 0);
        let mut worst_at = String::new();
        for seed in a.first_seed..a.first_seed + a.seeds {
            let o = gradcheck::run_module(module, seed, &cfg)?;
            entries += o.entries;
            skipped += o.skipped;
            if o.max_rel_error >= worst {
                worst = o.max_rel_error;
                worst_at = format!("seed {seed}: {}", o.worst);
            }
        }
        let pass = worst <= cfg.tolerance;
        println!(
            "{:<4} {module:<11} seeds={} entries={entries} kink-skipped={skipped} max_rel_error={worst:.3e}  ({worst_at})",
            if pass { "PASS" } else { "FAIL" },
            a.seeds
        );
        if !pass {
            failed.push(module.name());
        }
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let bytes = fs::read(&a.path).map_err(|e| Failure {
        code: 2,
        message: format!("cannot read {}: {e}", a.path.display()),
    })?;
    match bytes.get(..4) {
        Some(m) if m == &checkpoint::MAGIC[..] => {
            let store = checkpoint::decode(&bytes)?;
            println!("checkpoint {}", a.path.display());
            println!("content hash {:016x}", data::config_hash(&bytes));
            println!("{} tensors, {} values", store.len(), store.numel());
            for (name, t) in store.iter() {
                println!("  {name:<40} {:?}", t.shape());
            }
            if let Ok(s) = load_sidecar(&a.path) {
                println!("config hash {}", s.config_hash);
                println!("ablation {}, best epoch {}", s.ablation, s.best_epoch);
            }
        }
        Some(m) if m == &data::MAGIC[..] => {
            let h = data::read_header_bytes(&bytes)?;
            println!("dataset {}", a.path.display());
            println!("d {}", h.d);
            println!("candidates {}", h.candidates);
            println!("instances {}", h.count);
            println!("config hash {}", h.config_hash);
            println!("config {}", h.config_json);
        }
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: "unknown magic; expected \"NDCR\" or \"NDCD\"".into(),
            }
            .into())
        }
    }
    Ok(())
}
