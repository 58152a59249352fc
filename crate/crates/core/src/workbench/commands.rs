//! The `sarlab` subcommands as library calls. Each writes its artifacts into
//! an output directory guarded by a [`DirLock`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::experiment::{sampling_ablation, sf_ablation, train_loop, Workspace};
use super::metrics::{eval_row, read_csv, MetricsSink};
use super::output::{encode_netpbm_raw, tile, token_dump, write_netpbm, DirLock};
use super::plot::chart_from_csv;
use crate::error::{bail, Error, Result};
use crate::evaluation::{nfe_report, EvalReport};
use crate::generator::Generator;
use crate::rng::{stream, Stream};
use crate::sampling::{generate, SamplerConfig, Strategy};
use crate::training::{StepMetrics, TrainConfig, Trainer};

type Ws = Workspace<f32>;

/// Header of `ablate_sf.csv` and `ablate_sampling.csv`.
pub const ABLATION_HEADER: &str = "scheme,step,fd,precision,recall,per_scale_fd,nfe";

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(|e| e.context(format!("parsing {}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).map_err(|e| e.context(format!("loading {}", path.display())))
}

fn write_resolved(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::write(dir.join("config.txt"), config.to_text())?;
    Ok(())
}

/// Trains `steps` steps, streaming metrics (and periodic evaluations) into `dir`.
fn run_phase(
    ws: &Ws,
    trainer: &mut Trainer<f32>,
    steps: usize,
    dir: &Path,
    label: &str,
) -> Result<Vec<StepMetrics>> {
    let mut sink = MetricsSink::open(dir)?;
    let every = ws.config.eval_every;
    let sampler = ws.config.sampler.clone();
    let end = trainer.steps_done() + steps as u64;
    let records = train_loop(trainer, &ws.train, steps, |t, m, secs| {
        sink.emit(m, secs)?;
        if m.step % 100 == 0 {
            info!(
                "{label} step {} loss {:.4} (tf {:.4}, csf {:.4}) nfe {}",
                m.step, m.loss, m.loss_tf, m.loss_csf, m.nfe
            );
        }
        if every > 0 && (m.step + 1) % every as u64 == 0 && m.step + 1 < end {
            let r = ws.evaluate(t.generator(), &sampler)?;
            sink.emit_eval(&m.scheme, m.step + 1, &r)?;
        }
        Ok(())
    })?;
    sink.flush()?;
    Ok(records)
}

fn final_eval(
    ws: &Ws,
    generator: &Generator<f32>,
    dir: &Path,
    scheme: &str,
    step: u64,
) -> Result<EvalReport> {
    let r = ws.evaluate(generator, &ws.config.sampler)?;
    MetricsSink::open(dir)?.emit_eval(scheme, step, &r)?;
    info!(
        "{scheme} @ {step}: fd {:.5} precision {:.3} recall {:.3}",
        r.fd, r.precision, r.recall
    );
    Ok(r)
}

/// Trains from scratch with the `train.*` scheme; writes `model.ckpt`,
/// `metrics.csv`, `timing.csv`, `eval.csv` and `config.txt` into `dir`.
pub fn train(config: &ExperimentConfig, dir: &Path) -> Result<EvalReport> {
    let _lock = DirLock::acquire(dir)?;
    write_resolved(dir, config)?;
    let ws = Ws::prepare(config)?;
    let mut trainer = ws.trainer(ws.new_generator()?, config.train.clone())?;
    run_phase(&ws, &mut trainer, config.train.steps, dir, "train")?;
    ws.checkpoint(&trainer).save(&dir.join("model.ckpt"))?;
    final_eval(
        &ws,
        trainer.generator(),
        dir,
        &config.train.schedule_kind.to_string(),
        trainer.steps_done(),
    )
}

/// The checkpoint's config with the `refine.*`, `sample.*`, `eval.*` and
/// `run.output` keys of `overrides` applied.
pub fn continuation_config(
    ckpt: &Checkpoint<f32>,
    overrides: Option<&ExperimentConfig>,
) -> ExperimentConfig {
    let mut config = ckpt.config.clone();
    if let Some(other) = overrides {
        config.refine = other.refine.clone();
        config.sampler = other.sampler.clone();
        config.eval_every = other.eval_every;
        config.eval_samples = other.eval_samples;
        config.output = other.output.clone();
    }
    config
}

fn continuation_workspace(ckpt: &Checkpoint<f32>, config: &ExperimentConfig) -> Result<Ws> {
    Ws::from_checkpoint(&Checkpoint {
        config: config.clone(),
        ..ckpt.clone()
    })
}

/// Continues `from` with the `refine.*` scheme; writes `refined.ckpt` and metrics into `dir`.
pub fn refine(from: &Path, overrides: &ExperimentConfig, dir: &Path) -> Result<EvalReport> {
    let ckpt = load_ckpt(from)?;
    let config = continuation_config(&ckpt, Some(overrides));
    let _lock = DirLock::acquire(dir)?;
    write_resolved(dir, &config)?;
    let ws = continuation_workspace(&ckpt, &config)?;
    let mut trainer = ws.resume(&ckpt, config.refine.clone())?;
    run_phase(&ws, &mut trainer, config.refine.steps, dir, "refine")?;
    ws.checkpoint(&trainer).save(&dir.join("refined.ckpt"))?;
    final_eval(
        &ws,
        trainer.generator(),
        dir,
        &config.refine.schedule_kind.to_string(),
        trainer.steps_done(),
    )
}

/// Overrides applied by `sample` on top of the checkpoint's sampler.
#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub seed: Option<u64>,
    /// `Some(None)` disables guidance.
    pub cfg: Option<Option<f64>>,
    pub argmax: bool,
}

/// Parses a `--cfg` value: a number, or `off`.
pub fn parse_cfg(text: &str) -> Result<Option<f64>> {
    if text == "off" {
        return Ok(None);
    }
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => bail!(Usage, "--cfg expects a number or `off`, got {text:?}"),
    }
}

fn ext(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Generates `n` images of class `label` plus a contact sheet (and token dumps
/// in discrete mode) into `dir`.
pub fn sample(
    ckpt_path: &Path,
    label: usize,
    n: usize,
    opts: &SampleOptions,
    dir: &Path,
) -> Result<()> {
    let ckpt = load_ckpt(ckpt_path)?;
    if label >= ckpt.config.dataset.classes {
        bail!(
            Usage,
            "label {label} out of range (classes = {})",
            ckpt.config.dataset.classes
        );
    }
    let _lock = DirLock::acquire(dir)?;
    let mut sampler: SamplerConfig = ckpt.config.sampler.clone();
    if let Some(s) = opts.seed {
        sampler.seed = s;
    }
    if let Some(c) = opts.cfg {
        sampler.cfg_scale = c;
    }
    if opts.argmax {
        sampler.strategy = Strategy::Argmax;
    }
    let generator =
        Generator::<f32>::from_state(ckpt.config.generator_config(), ckpt.state.clone())?;
    let mut images = Vec::with_capacity(n);
    for j in 0..n {
        let mut rng = stream(sampler.seed, Stream::Generate, &[label as u64, j as u64]);
        let g = generate(
            &generator,
            label,
            &sampler,
            ckpt.codebook.as_ref(),
            &ckpt.patch,
            &mut rng,
        )?;
        write_netpbm(
            &dir.join(format!(
                "sample_{label}_{j}.{}",
                ext(ckpt.config.dataset.channels)
            )),
            &g.image,
        )?;
        if let Some(t) = &g.tokens {
            fs::write(dir.join(format!("tokens_{label}_{j}.txt")), token_dump(t))?;
        }
        images.push(g.image);
    }
    if !images.is_empty() {
        let (w, h, ch, data) = tile(&images, 8)?;
        fs::write(
            dir.join(format!("sheet_{label}.{}", ext(ch))),
            encode_netpbm_raw(w, h, ch, &data)?,
        )?;
    }
    let mut resolved = ckpt.config.clone();
    resolved.sampler = sampler;
    write_resolved(dir, &resolved)?;
    info!("wrote {n} samples of class {label} to {}", dir.display());
    Ok(())
}

/// FD proxy, precision and recall of a checkpoint. `dataset` replaces the
/// evaluation set (same shape and classes as the training set).
pub fn eval(
    ckpt_path: &Path,
    dataset: Option<&ExperimentConfig>,
    dir: &Path,
) -> Result<EvalReport> {
    let ckpt = load_ckpt(ckpt_path)?;
    let _lock = DirLock::acquire(dir)?;
    let mut ws = Ws::from_checkpoint(&ckpt)?;
    let mut config = ckpt.config.clone();
    if let Some(other) = dataset {
        let mut spec = other.eval_dataset();
        if (spec.side, spec.channels, spec.classes)
            != (
                config.dataset.side,
                config.dataset.channels,
                config.dataset.classes,
            )
        {
            bail!(
                Usage,
                "evaluation dataset shape/classes differ from the checkpoint's"
            );
        }
        spec.size = other.eval_samples;
        ws.set_eval_dataset(&spec)?;
        config.dataset = other.dataset.clone();
        config.eval_dataset_seed = other.eval_dataset_seed;
        config.eval_samples = other.eval_samples;
    }
    write_resolved(dir, &config)?;
    let generator =
        Generator::<f32>::from_state(ckpt.config.generator_config(), ckpt.state.clone())?;
    final_eval(&ws, &generator, dir, "eval", ckpt.step)
}

/// One ablation arm: its name, final step, report and training NFE per step.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub scheme: String,
    pub step: u64,
    pub report: EvalReport,
    pub nfe: usize,
}

impl AblationRow {
    /// CSV row under [`ABLATION_HEADER`]; `nfe` is training forwards per step.
    pub fn csv(&self) -> String {
        let mut r = self.report.clone();
        r.nfe_per_image = self.nfe;
        eval_row(&self.scheme, self.step, &r)
    }
}

fn continue_with(
    ckpt: &Checkpoint<f32>,
    ws: &Ws,
    train: TrainConfig,
    dir: &Path,
    name: &str,
) -> Result<AblationRow> {
    let mut trainer = ws.resume(ckpt, train.clone())?;
    let sub = dir.join(name.replace(['(', ')'], "_"));
    let records = run_phase(ws, &mut trainer, train.steps, &sub, name)?;
    let report = ws.evaluate(trainer.generator(), &ws.config.sampler)?;
    info!(
        "{name}: fd {:.5} precision {:.3} recall {:.3}",
        report.fd, report.precision, report.recall
    );
    let nfe = records.iter().map(|m| m.nfe).max().unwrap_or(0);
    Ok(AblationRow {
        scheme: name.to_string(),
        step: trainer.steps_done(),
        report,
        nfe,
    })
}

fn ablate(
    ckpt_path: &Path,
    overrides: Option<&ExperimentConfig>,
    dir: &Path,
    file: &str,
    arms: impl Fn(&ExperimentConfig) -> Vec<(String, TrainConfig)>,
) -> Result<Vec<AblationRow>> {
    let ckpt = load_ckpt(ckpt_path)?;
    let config = continuation_config(&ckpt, overrides);
    let _lock = DirLock::acquire(dir)?;
    write_resolved(dir, &config)?;
    let ws = continuation_workspace(&ckpt, &config)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut rows = Vec::new();
    for (name, train) in arms(&config) {
        let row = continue_with(&ckpt, &ws, train, dir, &name)?;
        csv += &row.csv();
        csv.push('\n');
        rows.push(row);
    }
    fs::write(dir.join(file), csv)?;
    Ok(rows)
}

/// Continues a checkpoint under TF, full, alternate, interleave and
/// hybrid(N-1) for `refine.steps` steps each; writes `ablate_sf.csv`.
pub fn ablate_sf(
    ckpt: &Path,
    overrides: Option<&ExperimentConfig>,
    dir: &Path,
) -> Result<Vec<AblationRow>> {
    ablate(ckpt, overrides, dir, "ablate_sf.csv", |c| {
        sf_ablation(&c.refine, c.schedule.len())
    })
}

/// Refines a checkpoint with argmax, stochastic and guided rollouts; writes `ablate_sampling.csv`.
pub fn ablate_sampling(
    ckpt: &Path,
    overrides: Option<&ExperimentConfig>,
    dir: &Path,
) -> Result<Vec<AblationRow>> {
    ablate(ckpt, overrides, dir, "ablate_sampling.csv", |c| {
        sampling_ablation(&c.refine)
    })
}

/// Writes SVG charts, `nfe.tsv` files and `report.md` for every CSV under `dir`.
pub fn report(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!(Usage, "{} is not a directory", dir.display());
    }
    let mut csvs: Vec<PathBuf> = walk(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    csvs.sort();
    let mut md = String::from("# Run report\n");
    for path in csvs {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("data")
            .to_string();
        let text = fs::read_to_string(&path)?;
        let (header, rows) = read_csv(&text);
        let rel = path
            .strip_prefix(dir)
            .unwrap_or(&path)
            .display()
            .to_string();
        match name.as_str() {
            "metrics" => {
                fs::write(
                    path.with_file_name("loss.svg"),
                    chart_from_csv(&text, "loss", "training loss"),
                )?;
                fs::write(
                    path.with_file_name("loss_tf.svg"),
                    chart_from_csv(&text, "loss_tf", "teacher-forcing loss"),
                )?;
                let records: Vec<StepMetrics> = rows
                    .iter()
                    .map(|r| StepMetrics {
                        step: r.step,
                        scheme: r.scheme.clone(),
                        loss: r.values[0],
                        loss_tf: r.values[1],
                        loss_csf: r.values[2],
                        per_scale_tf: Vec::new(),
                        nfe: r.values[3] as usize,
                    })
                    .collect();
                let mut nfe = String::from("scheme,steps,nfe_min,nfe_max,nfe_mean\n");
                let _ = writeln!(md, "\n## NFE per step ({rel})\n\n| scheme | steps | min | max | mean |\n|---|---|---|---|---|");
                for row in nfe_report(&records) {
                    let _ = writeln!(
                        nfe,
                        "{},{},{},{},{}",
                        row.scheme, row.steps, row.min, row.max, row.mean
                    );
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} | {} |",
                        row.scheme, row.steps, row.min, row.max, row.mean
                    );
                }
                fs::write(path.with_file_name("nfe.tsv"), nfe.replace(',', "\t"))?;
            }
            "eval" => {
                fs::write(
                    path.with_file_name("fd.svg"),
                    chart_from_csv(&text, "fd", "FD proxy"),
                )?;
            }
            _ => {}
        }
        if header.first().map(String::as_str) == Some("scheme") && header.iter().any(|h| h == "fd")
        {
            let _ = writeln!(
                md,
                "\n## {rel}\n\n| {} |\n|{}",
                header.join(" | "),
                "---|".repeat(header.len())
            );
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                let _ = writeln!(
                    md,
                    "| {} |",
                    line.split(',').collect::<Vec<_>>().join(" | ")
                );
            }
        }
    }
    fs::write(dir.join("report.md"), md)?;
    info!("report written to {}", dir.join("report.md").display());
    Ok(())
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}
