use std::fs;
use std::path::{Path, PathBuf};

use globaldoc::certify::certify_all;
use globaldoc::config::RunConfig;
use globaldoc::datagen::{self, CorpusManifest, Split};
use globaldoc::encoders::{Checkpoint, GlobalDocModel};
use globaldoc::evaluation::{self, RetrievalIndex, DEFAULT_KS};
use globaldoc::objectives::Setting;
use globaldoc::trainer::{Trainer, FINAL_CHECKPOINT_DIR, MODEL_FILE};
use globaldoc::{DocumentPair, Error, Result};

use crate::{Command, Common, ModelInput};

pub const CONFIG_ECHO: &str = "config.txt";

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))
        })
        .collect()
}

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.to_string()));
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write_text(&dir.join(CONFIG_ECHO), &cfg.to_text())
}

/// Location of the weights file for `--model`.
fn model_file(dir: &Path) -> PathBuf {
    let direct = dir.join(MODEL_FILE);
    if direct.is_file() {
        direct
    } else {
        dir.join(FINAL_CHECKPOINT_DIR).join(MODEL_FILE)
    }
}

/// Resolve config for commands reading a model: an explicit `--config`
/// wins over the model directory's echoed config.
fn resolve_with_model(common: &Common, input: &ModelInput, extra: Vec<(String, String)>) -> Result<RunConfig> {
    let echoed = input.model.as_ref().map(|m| m.join(CONFIG_ECHO)).filter(|p| p.is_file());
    let file = common.config.clone().or(echoed);
    let mut ov = overrides(&common.set)?;
    ov.extend(extra);
    RunConfig::resolve(file.as_deref(), &ov)
}

/// Copy the corpus geometry into `cfg`.
fn adopt_corpus(cfg: &mut RunConfig, manifest: &CorpusManifest) -> Result<()> {
    let g = &manifest.generator;
    for (key, value) in [
        ("image_size", g.image_size),
        ("channels", g.channels),
        ("vocab", g.vocab_size),
        ("classes", g.num_categories),
    ] {
        if cfg.get(key) != Some(value.to_string().as_str()) {
            log::info!("{key} = {value} taken from the corpus manifest");
            cfg.set(key, &value.to_string())?;
        }
    }
    cfg.validate()
}

fn load_model(cfg: &RunConfig, input: &ModelInput) -> Result<GlobalDocModel<f32>> {
    let mut model = GlobalDocModel::new(cfg.model()?)?;
    match &input.model {
        Some(dir) => model.load_checkpoint(&Checkpoint::read(&model_file(dir))?)?,
        None => log::warn!("no --model given; evaluating freshly initialized weights"),
    }
    Ok(model)
}

struct Loaded {
    cfg: RunConfig,
    model: GlobalDocModel<f32>,
    train: Vec<DocumentPair>,
    test: Vec<DocumentPair>,
}

fn load_for_eval(common: &Common, input: &ModelInput, extra: Vec<(String, String)>) -> Result<Loaded> {
    let mut cfg = resolve_with_model(common, input, extra)?;
    let (manifest, corpus) = datagen::load_all(&input.corpus)?;
    adopt_corpus(&mut cfg, &manifest)?;
    let model = load_model(&cfg, input)?;
    prepare_out(&common.out, &cfg)?;
    Ok(Loaded {
        cfg,
        model,
        train: corpus.train,
        test: corpus.test,
    })
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus {
            common,
            seed,
            classes,
            per_class,
            separability,
            image_size,
            vocab,
        } => {
            let mut ov = overrides(&common.set)?;
            push(&mut ov, "seed", seed);
            push(&mut ov, "classes", classes);
            push(&mut ov, "per_class", per_class);
            push(&mut ov, "separability", separability);
            push(&mut ov, "image_size", image_size);
            push(&mut ov, "vocab", vocab);
            let cfg = RunConfig::resolve(common.config.as_deref(), &ov)?;
            let manifest = datagen::generate_corpus(&cfg.generator()?, &common.out)?;
            write_text(&common.out.join(CONFIG_ECHO), &cfg.to_text())?;
            log::info!(
                "wrote {} train / {} test documents to {}",
                manifest.count(Split::Train),
                manifest.count(Split::Test),
                common.out.display()
            );
            Ok(())
        }
        Command::Pretrain {
            common,
            corpus,
            setting,
            seed,
            steps,
            batch_size,
            resume,
        } => {
            let mut ov = overrides(&common.set)?;
            push(&mut ov, "setting", setting);
            push(&mut ov, "seed", seed);
            push(&mut ov, "total_steps", steps);
            push(&mut ov, "batch_size", batch_size);
            let mut cfg = RunConfig::resolve(common.config.as_deref(), &ov)?;
            let manifest = datagen::read_manifest(&corpus)?;
            adopt_corpus(&mut cfg, &manifest)?;
            let docs = datagen::load_split(&corpus, &manifest, Split::Train)?;
            prepare_out(&common.out, &cfg)?;
            let model = GlobalDocModel::new(cfg.model()?)?;
            let mut trainer = match resume {
                Some(dir) => Trainer::resume(cfg.train()?, model, &dir)?,
                None => Trainer::new(cfg.train()?, model)?,
            };
            trainer.train(&docs, Some(&common.out))?;
            if let Some(last) = trainer.history.last() {
                log::info!("{}", last.to_line());
            }
            Ok(())
        }
        Command::EvalFewshot {
            common,
            input,
            way,
            shot,
            episodes,
            meta_steps,
        } => {
            let mut extra = Vec::new();
            push(&mut extra, "way", way);
            push(&mut extra, "shot", shot);
            push(&mut extra, "episodes", episodes);
            push(&mut extra, "meta_steps", meta_steps);
            let mut l = load_for_eval(&common, &input, extra)?;
            let (base, novel) = l.cfg.class_split()?;
            let meta = l.cfg.meta()?;
            let mut text = String::new();
            if meta.steps > 0 {
                let losses = evaluation::meta_finetune(&mut l.model, &l.train, &base, &meta)?;
                text.push_str(&format!(
                    "# meta_finetune steps={} first_loss={} last_loss={}\n",
                    losses.len(),
                    losses.first().copied().unwrap_or(f64::NAN),
                    losses.last().copied().unwrap_or(f64::NAN)
                ));
            }
            let report = evaluation::fewshot_report(&l.model, &l.test, &novel, l.cfg.embed_spec()?, &l.cfg.episode()?)?;
            text.push_str(&report.to_text());
            print!("{text}");
            write_text(&common.out.join("fewshot.txt"), &text)
        }
        Command::EvalRetrieval { common, input } => {
            let l = load_for_eval(&common, &input, Vec::new())?;
            let report = evaluation::retrieval_report(&l.model, &l.test, l.cfg.embed_spec()?, &DEFAULT_KS)?;
            let text = report.to_text();
            print!("{text}");
            write_text(&common.out.join("retrieval.txt"), &text)
        }
        Command::LinearProbe { common, input, modality } => {
            let mut extra = Vec::new();
            push(&mut extra, "modality", modality);
            let l = load_for_eval(&common, &input, extra)?;
            let modality = l.cfg.modality()?;
            let spec = l.cfg.embed_spec()?;
            let embed = |docs: &[DocumentPair]| -> Result<(Vec<Vec<f32>>, Vec<u32>)> {
                let records = evaluation::embed_documents(&l.model, docs, modality, spec)?;
                Ok((records.into_iter().map(|r| r.vector).collect(), docs.iter().map(|d| d.label).collect()))
            };
            let (xtr, ytr) = embed(&l.train)?;
            let (xte, yte) = embed(&l.test)?;
            let acc = evaluation::linear_probe(&xtr, &ytr, &xte, &yte, &l.cfg.probe()?)?;
            let text = format!("modality train test accuracy\n{} {} {} {:.4}\n", modality.short(), xtr.len(), xte.len(), acc);
            print!("{text}");
            write_text(&common.out.join("probe.txt"), &text)
        }
        Command::ExportEmbeddings {
            common,
            input,
            modality,
            split,
        } => {
            let mut extra = Vec::new();
            push(&mut extra, "modality", modality);
            let l = load_for_eval(&common, &input, extra)?;
            let split: Split = split.parse()?;
            let docs = match split {
                Split::Train => &l.train,
                Split::Test => &l.test,
            };
            let index: RetrievalIndex = evaluation::build_index(&l.model, docs, l.cfg.modality()?, l.cfg.embed_spec()?)?;
            let path = common.out.join("embeddings.gemb");
            evaluation::write_embeddings(&path, &index)?;
            log::info!("wrote {} embeddings of dim {} to {}", index.len(), index.dim(), path.display());
            Ok(())
        }
        Command::Gradcheck {
            config,
            set,
            out,
            setting,
            dim,
            seed,
            max_coords,
        } => {
            let mut ov = overrides(&set)?;
            ov.push(("setting".into(), setting.clone()));
            let cfg = RunConfig::resolve(config.as_deref(), &ov)?;
            let setting: Setting = setting.parse()?;
            let certs = certify_all(setting, dim, seed, max_coords)?;
            let text: String = certs.iter().map(|c| c.line() + "\n").collect();
            print!("{text}");
            if let Some(dir) = out {
                prepare_out(&dir, &cfg)?;
                write_text(&dir.join("gradcheck.txt"), &text)?;
            }
            match certs.iter().find(|c| !c.report.passed()) {
                Some(c) => Err(Error::GradcheckFailed {
                    max_error: c.report.max_error(),
                    tolerance: c.report.tolerance,
                }),
                None => Ok(()),
            }
        }
    }
}
