use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use gap_core::bench::metrics::RecallTally;
use gap_core::bench::{answer_vocab, evaluate, generate_world, word_vocab, Dataset, MetricsReport, RunMetadata};
use gap_core::grounder::GroundingParams;
use gap_core::models::{finetune_vqa, mean_attention_kl, pretrain_attention, VqaModel};
use gap_core::pipeline::{
    compute_priors, config_hash, items, phrase_table, prior_table, read_priors, sample_efficiency_sweep,
    sweep_curves, train_instance_grounder, write_priors, PriorRecord, PriorSource, SweepRow,
};
use gap_core::refine::verify_oracle_equivalence;
use gap_core::{GapError, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;

pub const ORACLE_TOLERANCE: f64 = 1e-4;

/// File layout of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(cfg: &RunConfig) -> Self {
        RunDir { root: cfg.run_dir() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn grounder(&self) -> PathBuf {
        self.root.join("checkpoints").join("grounder.json")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.root.join("checkpoints").join("pretrained.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("checkpoints").join("model.json")
    }
    pub fn priors(&self) -> PathBuf {
        self.root.join("priors.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.json")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
    pub fn sweep_svg(&self) -> PathBuf {
        self.root.join("sweep.svg")
    }

    fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(self.root.join("checkpoints"))?;
        std::fs::write(self.root.join("config.toml"), cfg.to_toml()?)?;
        Ok(())
    }

    fn log(&self, entry: serde_json::Value) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("log.jsonl"))?;
        serde_json::to_writer(&mut f, &entry)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(GapError::MissingArtifact(format!("{} (run `gap {hint}` first)", path.display())))
    }
}

fn load_dataset(dir: &RunDir) -> Result<Dataset> {
    require(&dir.data().join("train.jsonl"), "gen")?;
    require(&dir.data().join("val.jsonl"), "gen")?;
    Dataset::read_dir(&dir.data())
}

fn load_priors(dir: &RunDir) -> Result<Vec<PriorRecord>> {
    require(&dir.priors(), "export-priors")?;
    read_priors(&dir.priors())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Hash of the settings that determine results; the output location is
/// excluded.
fn run_hash(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.runs_dir = PathBuf::new();
    config_hash(&c)
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::new(cfg);
    dir.prepare(cfg)?;
    let ds = generate_world(&cfg.world, cfg.seed)?;
    ds.write_dir(&dir.data())?;
    dir.log(json!({"command": "gen", "seed": cfg.seed, "train": ds.train.len(), "val": ds.val.len()}))?;
    println!(
        "generated {} train and {} val instances in {}",
        ds.train.len(),
        ds.val.len(),
        dir.data().display()
    );
    Ok(())
}

pub fn train_ground(cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::new(cfg);
    let ds = load_dataset(&dir)?;
    dir.prepare(cfg)?;
    let whole_query = cfg.prior_source() == PriorSource::WholeQuery;
    let (params, log) = train_instance_grounder(&ds.train, &cfg.grounder_config(), whole_query, cfg.seed)?;
    params.save(&dir.grounder())?;
    for e in &log {
        dir.log(json!({"command": "train-ground", "epoch": e.epoch, "loss": e.loss}))?;
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "grounder trained for {} epochs, contrastive loss {:.4} -> {:.4}",
            last.epoch,
            first.loss,
            last.loss
        );
    }
    Ok(())
}

pub fn export_priors(cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::new(cfg);
    let ds = load_dataset(&dir)?;
    dir.prepare(cfg)?;
    let source = cfg.prior_source();
    let grounder = match source {
        PriorSource::Grounder | PriorSource::WholeQuery => {
            require(&dir.grounder(), "train-ground")?;
            Some(GroundingParams::load(&dir.grounder())?)
        }
        PriorSource::Uniform | PriorSource::Random => None,
    };
    let all: Vec<_> = ds.all().cloned().collect();
    let records = compute_priors(&all, source, grounder.as_ref(), cfg.grounder.aggregation, cfg.seed)?;
    write_priors(&dir.priors(), &records)?;
    let phrases = phrase_table(&records);
    let mut tally = RecallTally::default();
    for inst in &ds.val {
        if let Some(scores) = phrases.get(&inst.id) {
            tally.add(inst, scores)?;
        }
    }
    let recall = tally.recall();
    dir.log(json!({"command": "export-priors", "source": source, "records": records.len(), "val_phrases": tally.phrases, "val_recall": recall}))?;
    println!("exported {} priors ({source:?}) to {}", records.len(), dir.priors().display());
    for (k, r) in &recall {
        println!("val recall@{k}: {r:.4} over {} phrases", tally.phrases);
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    if !cfg.use_prior() {
        return Err(GapError::Config("pre-training needs priors but ablation.no_prior is set".into()));
    }
    let dir = RunDir::new(cfg);
    let ds = load_dataset(&dir)?;
    let records = load_priors(&dir)?;
    dir.prepare(cfg)?;
    let table = prior_table(&records);
    let train = items(&ds.train)?;
    let val = items(&ds.val)?;
    let mut model = VqaModel::new(cfg.model_config(), word_vocab(), answer_vocab(), cfg.seed)?;
    let before = mean_attention_kl(&model, &val, &table)?;
    let log = pretrain_attention(&mut model, &train, &table, &cfg.pretrain, cfg.seed)?;
    let after = mean_attention_kl(&model, &val, &table)?;
    model.save(&dir.pretrained())?;
    for e in &log {
        dir.log(json!({"command": "pretrain", "epoch": e.epoch, "loss": e.loss}))?;
    }
    dir.log(json!({"command": "pretrain", "val_kl_before": before, "val_kl_after": after}))?;
    println!(
        "held-out KL(prior || attention) {before:.4} -> {after:.4} ({:.1}% reduction)",
        100.0 * (1.0 - after / before)
    );
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::new(cfg);
    let ds = load_dataset(&dir)?;
    let variant = cfg.variant();
    let records = if variant.use_prior { Some(load_priors(&dir)?) } else { None };
    let mut model = if variant.pretrain.is_some() {
        require(&dir.pretrained(), "pretrain")?;
        let mut m = VqaModel::load(&dir.pretrained())?;
        let want = cfg.model_config();
        if m.config.family != want.family || m.config.dim != want.dim || m.config.steps != want.steps {
            return Err(GapError::Config(format!(
                "pre-trained checkpoint {} does not match the configured model",
                dir.pretrained().display()
            )));
        }
        m.config = want;
        m
    } else {
        VqaModel::new(cfg.model_config(), word_vocab(), answer_vocab(), cfg.seed)?
    };
    dir.prepare(cfg)?;
    let table = records.as_deref().map(prior_table);
    let train = items(&ds.train)?;
    let log = finetune_vqa(
        &mut model,
        &train,
        table.as_ref(),
        &cfg.finetune,
        cfg.seed,
        cfg.supervision_fraction,
    )?;
    model.save(&dir.model())?;
    for e in &log {
        dir.log(json!({"command": "finetune", "epoch": e.epoch, "loss": e.loss, "accuracy": e.accuracy}))?;
    }
    if let Some(last) = log.last() {
        println!(
            "fine-tuned for {} epochs, final loss {:.4}, train accuracy {:.4}",
            log.len(),
            last.loss,
            last.accuracy.unwrap_or(0.0)
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, no_prior: bool, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let dir = RunDir::new(cfg);
    let ds = load_dataset(&dir)?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.model());
    require(&ckpt, "finetune")?;
    let model = VqaModel::load(&ckpt)?;
    let refine = cfg.use_prior() && !no_prior;
    let records = if refine {
        Some(load_priors(&dir)?)
    } else if dir.priors().exists() {
        Some(read_priors(&dir.priors())?)
    } else {
        None
    };
    let table = refine.then(|| records.as_deref().map(prior_table)).flatten();
    let phrases = records.as_deref().map(phrase_table);
    let meta = RunMetadata {
        seed: cfg.seed,
        config_hash: run_hash(cfg)?,
        label: Some(if refine { cfg.name.clone() } else { format!("{}-no-prior", cfg.name) }),
    };
    let report = evaluate(&model, &ds.val, table.as_ref(), phrases.as_ref(), meta)?;
    write_json(&dir.metrics(), &report)?;
    dir.log(json!({"command": "eval", "refine": refine, "accuracy": report.accuracy, "grounding_score": report.grounding_score}))?;
    println!("accuracy {:.4} on {} instances", report.accuracy, report.instances);
    for (t, a) in &report.per_type_accuracy {
        println!("  {t}: {a:.4}");
    }
    for (k, s) in &report.grounding_score {
        println!("grounding score@{k}: {s:.4}");
    }
    for (k, r) in &report.recall {
        println!("phrase recall@{k}: {r:.4}");
    }
    Ok(report)
}

/// Contents of `sweep.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    pub rows: Vec<SweepRow>,
    pub curves: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub fraction: f64,
    pub accuracy: f64,
}

pub fn sweep(cfg: &RunConfig, fractions: Option<&[f64]>) -> Result<SweepFile> {
    if !cfg.use_prior() {
        return Err(GapError::Config("the sweep compares against GAP but ablation.no_prior is set".into()));
    }
    let fractions = fractions.unwrap_or(&cfg.fractions);
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(GapError::Config(format!("fraction {f} outside (0, 1]")));
    }
    let dir = RunDir::new(cfg);
    let ds = load_dataset(&dir)?;
    let records = load_priors(&dir)?;
    dir.prepare(cfg)?;
    let rows = sample_efficiency_sweep(
        &ds,
        &records,
        &cfg.baseline_variant(),
        &cfg.variant(),
        fractions,
        &cfg.seeds,
    )?;
    let curves: Vec<CurvePoint> = sweep_curves(&rows)
        .into_iter()
        .map(|(variant, fraction, accuracy)| CurvePoint {
            variant,
            fraction,
            accuracy,
        })
        .collect();
    let file = SweepFile { rows, curves };
    write_json(&dir.sweep(), &file)?;
    let mut csv = String::from("variant,fraction,accuracy\n");
    for c in &file.curves {
        csv.push_str(&format!("{},{},{:.6}\n", c.variant, c.fraction, c.accuracy));
    }
    std::fs::write(dir.sweep_csv(), &csv)?;
    dir.log(json!({"command": "sweep", "fractions": fractions, "seeds": cfg.seeds, "curves": file.curves}))?;
    print!("{csv}");
    Ok(file)
}

pub fn verify(cfg: &RunConfig, cases: Option<usize>) -> Result<()> {
    let cases = cases.unwrap_or(cfg.verify_cases);
    let report = verify_oracle_equivalence(cases, cfg.seed, ORACLE_TOLERANCE)?;
    if report.pass {
        println!(
            "oracle equivalence PASS, max L∞ {:.2e} < {ORACLE_TOLERANCE:e} over {} cases",
            report.max_linf(),
            report.cases
        );
        Ok(())
    } else {
        println!(
            "oracle equivalence FAIL, max L∞ {:.2e} >= {ORACLE_TOLERANCE:e} over {} cases",
            report.max_linf(),
            report.cases
        );
        Err(GapError::Verification(format!(
            "max L∞ {:.3e} exceeds {ORACLE_TOLERANCE:e}",
            report.max_linf()
        )))
    }
}

pub fn plot(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::new(cfg);
    require(&dir.sweep(), "sweep")?;
    let file: SweepFile = serde_json::from_str(&std::fs::read_to_string(dir.sweep())?)?;
    crate::plot::sweep_svg(&file.curves, &dir.sweep_svg())?;
    println!("wrote {}", dir.sweep_svg().display());
    Ok(dir.sweep_svg())
}
