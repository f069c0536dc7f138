use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{ingest, loss_on, predict_eval, train_model, Checkpoint, Dataset, EpochRecord, HarnessError, RunConfig, TrainOutcome};
use crate::enforce::{enforce, repairable_count, save_violations_csv, validate, ConstraintSpec};
use crate::features::{FeatureSchema, Mode};
use crate::metrics::{evaluate_outputs, save_svg, save_table_csv, MetricsTable, Series};
use crate::models::{Arch, ModelConfig};
use crate::pcap::{write_pcap, ParsedPacket};
use crate::session::{split_sessions, write_session_dump};
use crate::synth::{generate, GeneratorConfig};

/// Output directory that forgets its files if the command fails.
pub(super) struct RunDir {
    dir: PathBuf,
    created: bool,
    files: Vec<PathBuf>,
}

impl RunDir {
    fn open(dir: &Path) -> Result<Self, HarnessError> {
        let created = !dir.exists();
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), created, files: Vec::new() })
    }

    /// Registers and returns `dir/name`.
    pub(super) fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn discard(self) {
        if self.created {
            let _ = std::fs::remove_dir_all(&self.dir);
        } else {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }

    fn finish(mut self, command: &str, config_text: &str, seeds: &[u64]) -> Result<PathBuf, HarnessError> {
        let manifest = self.file("manifest.json");
        let files: Vec<PathBuf> = self.files.iter().filter(|f| **f != manifest).cloned().collect();
        write_manifest(&manifest, command, config_text, seeds, &files)?;
        Ok(self.dir)
    }
}

pub(super) fn in_run_dir<T>(
    dir: &Path,
    command: &str,
    config_text: &str,
    seeds: &[u64],
    body: impl FnOnce(&mut RunDir) -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    let mut run = RunDir::open(dir)?;
    let value = match body(&mut run) {
        Ok(v) => v,
        Err(e) => {
            run.discard();
            return Err(e);
        }
    };
    if run.files.is_empty() {
        return Ok(value);
    }
    let dir = run.dir.clone();
    let created = run.created;
    run.finish(command, config_text, seeds).map(|_| value).inspect_err(|_| {
        if created {
            let _ = std::fs::remove_dir_all(dir);
        }
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct ManifestFile {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seeds: &'a [u64],
    files: Vec<ManifestFile>,
}

/// Writes `manifest.json` describing a finished run: the config hash, seeds,
/// crate version and a digest of every output file.
pub fn write_manifest(path: &Path, command: &str, config_text: &str, seeds: &[u64], files: &[PathBuf]) -> Result<(), HarnessError> {
    let mut entries = Vec::new();
    for f in files.iter().filter(|f| f.exists()) {
        let bytes = std::fs::read(f)?;
        entries.push(ManifestFile {
            path: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seeds,
        files: entries,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn curve(history: &[EpochRecord], f: impl Fn(&EpochRecord) -> f64) -> Vec<(f64, f64)> {
    history.iter().map(|r| (r.epoch as f64, f(r))).collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthReport {
    pub packets: usize,
    pub sessions: usize,
    pub bytes: u64,
}

/// Generates a synthetic capture at `out`.
pub fn cmd_synth(cfg: &GeneratorConfig, out: &Path) -> Result<SynthReport, HarnessError> {
    let packets = generate(cfg)?;
    let sessions = crate::session::group_sessions(&packets).len();
    let bytes = match write_pcap(&packets, out) {
        Ok(b) => b,
        Err(e) => {
            let _ = std::fs::remove_file(out);
            return Err(e.into());
        }
    };
    Ok(SynthReport { packets: packets.len(), sessions, bytes })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub packets: usize,
    pub sessions: usize,
    pub skipped_non_tcp: usize,
    pub skipped_truncated: usize,
}

#[derive(Serialize)]
struct SessionRow {
    session: usize,
    initiator: String,
    responder: String,
    packets: usize,
    start_us: u64,
}

/// Assembles sessions and writes `sessions.csv` plus a per-packet dump.
pub fn cmd_ingest(input: &Path, out_dir: &Path) -> Result<IngestReport, HarnessError> {
    let (sessions, packets, skipped) = ingest(input)?;
    let text = input.display().to_string();
    in_run_dir(out_dir, "ingest", &text, &[], |run| {
        let mut w = csv::Writer::from_path(run.file("sessions.csv"))?;
        for s in &sessions {
            w.serialize(SessionRow {
                session: s.id,
                initiator: format!("{}:{}", s.initiator.ip, s.initiator.port),
                responder: format!("{}:{}", s.responder.ip, s.responder.port),
                packets: s.len(),
                start_us: s.start_us,
            })?;
        }
        w.flush()?;
        write_session_dump(&sessions, run.file("packets.jsonl"))?;
        Ok(IngestReport {
            packets,
            sessions: sessions.len(),
            skipped_non_tcp: skipped.non_tcp,
            skipped_truncated: skipped.truncated,
        })
    })
}

/// Fits a schema on the training split and writes `schema.json`.
pub fn cmd_fit_schema(cfg: &RunConfig) -> Result<FeatureSchema, HarnessError> {
    cfg.validate()?;
    let (sessions, _, _) = ingest(cfg.input()?)?;
    let (train, _) = split_sessions(&sessions, cfg.train_fraction, cfg.split_seed)?;
    let schema = FeatureSchema::fit(&train, cfg.mode)?;
    in_run_dir(&cfg.output_dir, "fit-schema", &cfg.to_toml(), &[cfg.split_seed], |run| {
        schema.save(run.file("schema.json"))?;
        Ok(())
    })?;
    for note in &schema.audit {
        log::warn!("schema audit: {note}");
    }
    Ok(schema)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub outcome: TrainOutcome,
    pub before: MetricsTable,
    pub after: MetricsTable,
}

fn evaluate_validation(
    model: &crate::models::SessionAutoencoder,
    data: &Dataset,
    spec: &ConstraintSpec,
    batch_size: usize,
) -> Result<crate::metrics::Evaluation, HarnessError> {
    let outputs = predict_eval(model, data.table(), &data.enc_val, batch_size)?;
    Ok(evaluate_outputs(&data.schema, &data.val, &data.enc_val, &outputs, data.table(), Some(spec))?)
}

fn train_into(run: &mut RunDir, cfg: &RunConfig, data: &Dataset, model_cfg: &ModelConfig, prefix: &str) -> Result<TrainReport, HarnessError> {
    let spec = cfg.constraint_spec()?;
    let opts = cfg.train_options(model_cfg.arch);
    let outcome = train_model(model_cfg, data, &opts, |r| {
        if r.epoch % 25 == 0 {
            log::info!("{prefix}{} epoch {}: train {:.5} val {:.5}", model_cfg.arch, r.epoch, r.train_loss, r.val_loss);
        }
    })?;
    write_history(&run.file(&format!("{prefix}losses.csv")), &outcome.history)?;
    save_svg(
        run.file(&format!("{prefix}loss_curve.svg")),
        &format!("{} loss", model_cfg.arch),
        "epoch",
        "loss",
        &[
            Series::new("train", curve(&outcome.history, |r| r.train_loss)),
            Series::new("validation", curve(&outcome.history, |r| r.val_loss)),
        ],
    )?;
    Checkpoint::new(&outcome, data, opts.batch_size).save(run.file(&format!("{prefix}checkpoint.json")))?;
    let ev = evaluate_validation(&outcome.model, data, &spec, opts.batch_size)?;
    let after = ev.after.expect("spec supplied");
    save_table_csv(run.file(&format!("{prefix}metrics.csv")), &ev.before)?;
    save_table_csv(run.file(&format!("{prefix}metrics_enforced.csv")), &after)?;
    save_violations_csv(run.file(&format!("{prefix}violations.csv")), &ev.violations)?;
    Ok(TrainReport { run_dir: run.dir.clone(), outcome, before: ev.before, after })
}

/// Trains one model on the configured capture.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport, HarnessError> {
    cfg.validate()?;
    let (sessions, _, _) = ingest(cfg.input()?)?;
    let data = Dataset::build(&sessions, cfg.mode, cfg)?;
    let text = cfg.to_toml();
    in_run_dir(&cfg.output_dir, "train", &text, &[cfg.model.seed, cfg.split_seed], |run| {
        std::fs::write(run.file("run_config.toml"), &text)?;
        data.schema.save(run.file("schema.json"))?;
        train_into(run, cfg, &data, &cfg.model, "")
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateReport {
    pub before: MetricsTable,
    pub after: MetricsTable,
    pub violations: usize,
}

/// Scores a checkpoint on every session of `input`.
pub fn cmd_evaluate(checkpoint: &Path, input: &Path, out_dir: &Path, disabled_rules: &[String]) -> Result<EvaluateReport, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore()?;
    let spec = ConstraintSpec::without(disabled_rules)?;
    let (sessions, _, _) = ingest(input)?;
    let encoded = ck.schema.encode_sessions(&sessions, ck.max_len);
    let outputs = predict_eval(&model, ck.embeddings.as_ref(), &encoded, ck.batch_size)?;
    let ev = evaluate_outputs(&ck.schema, &sessions, &encoded, &outputs, ck.embeddings.as_ref(), Some(&spec))?;
    let text = format!("{}\n{}", checkpoint.display(), input.display());
    in_run_dir(out_dir, "evaluate", &text, &[ck.model.seed], |run| {
        let after = ev.after.clone().expect("spec supplied");
        save_table_csv(run.file("metrics.csv"), &ev.before)?;
        save_table_csv(run.file("metrics_enforced.csv"), &after)?;
        save_violations_csv(run.file("violations.csv"), &ev.violations)?;
        Ok(EvaluateReport { before: ev.before.clone(), after, violations: ev.violations.len() })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CurveRow<'a> {
    arch: &'a str,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub arch: String,
    pub parameters: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub run_dir: PathBuf,
    pub rows: Vec<CompareRow>,
}

/// Trains each architecture on one shared split and plots the curves together.
pub fn cmd_compare_models(cfg: &RunConfig, archs: &[Arch]) -> Result<CompareReport, HarnessError> {
    cfg.validate()?;
    if archs.is_empty() {
        return Err(HarnessError::Config("no architectures to compare".into()));
    }
    let (sessions, _, _) = ingest(cfg.input()?)?;
    let data = Dataset::build(&sessions, cfg.mode, cfg)?;
    in_run_dir(&cfg.output_dir, "compare-models", &cfg.to_toml(), &[cfg.model.seed, cfg.split_seed], |run| {
        let mut series = Vec::new();
        let mut rows = Vec::new();
        let mut curves = csv::Writer::from_path(run.file("compare_losses.csv"))?;
        for &arch in archs {
            let mc = ModelConfig { arch, ..cfg.model.clone() };
            mc.validate()?;
            let out = train_model(&mc, &data, &cfg.train_options(arch), |_| {})?;
            for r in &out.history {
                curves.serialize(CurveRow { arch: arch.name(), epoch: r.epoch, train_loss: r.train_loss, val_loss: r.val_loss })?;
            }
            series.push(Series::new(format!("{arch} train"), curve(&out.history, |r| r.train_loss)));
            series.push(Series::new(format!("{arch} validation"), curve(&out.history, |r| r.val_loss)));
            rows.push(CompareRow {
                arch: arch.name().to_string(),
                parameters: out.model.parameter_count(),
                epochs: out.history.len(),
                best_epoch: out.best_epoch,
                best_val_loss: out.best_val.total,
            });
        }
        curves.flush()?;
        let mut w = csv::Writer::from_path(run.file("compare_summary.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        save_svg(run.file("compare_models.svg"), "training and validation loss", "epoch", "loss", &series)?;
        Ok(CompareReport { run_dir: run.dir.clone(), rows })
    })
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub run_dir: PathBuf,
    pub mse_only: TrainReport,
    pub kal: TrainReport,
}

#[derive(Serialize)]
struct AblationRow<'a> {
    feature: &'a str,
    mse_only_kind: &'a str,
    mse_only_error: f64,
    mse_only_scaled_mse: String,
    kal_kind: &'a str,
    kal_error: f64,
    kal_scaled_mse: String,
}

/// Trains with the squared-error-only objective and with the typed loss on
/// the same split, then tabulates both per feature.
pub fn cmd_loss_ablation(cfg: &RunConfig) -> Result<AblationReport, HarnessError> {
    cfg.validate()?;
    let (sessions, _, _) = ingest(cfg.input()?)?;
    let mse_data = Dataset::build(&sessions, Mode::MseOnly, cfg)?;
    let kal_data = Dataset::build(&sessions, Mode::Kal, cfg)?;
    in_run_dir(&cfg.output_dir, "loss-ablation", &cfg.to_toml(), &[cfg.model.seed, cfg.split_seed], |run| {
        let mse_only = train_into(run, cfg, &mse_data, &cfg.model, "mse_only_")?;
        let kal = train_into(run, cfg, &kal_data, &cfg.model, "kal_")?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |x| format!("{x:e}"));
        let mut w = csv::Writer::from_path(run.file("ablation.csv"))?;
        for (a, b) in mse_only.before.features.iter().zip(&kal.before.features) {
            w.serialize(AblationRow {
                feature: a.feature.name(),
                mse_only_kind: &a.kind,
                mse_only_error: a.reconstruction_error,
                mse_only_scaled_mse: fmt(a.scaled_mse),
                kal_kind: &b.kind,
                kal_error: b.reconstruction_error,
                kal_scaled_mse: fmt(b.scaled_mse),
            })?;
        }
        w.flush()?;
        let per_feature = |t: &MetricsTable| -> Vec<(f64, f64)> {
            t.features.iter().enumerate().map(|(i, f)| (i as f64, f.reconstruction_error)).collect()
        };
        save_svg(
            run.file("mse_vs_mse_ce.svg"),
            "reconstruction error by feature index",
            "feature",
            "error",
            &[Series::new("MSE only", per_feature(&mse_only.before)), Series::new("CE + MSE", per_feature(&kal.before))],
        )?;
        Ok(AblationReport { run_dir: run.dir.clone(), mse_only, kal })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropoutRun {
    pub model: String,
    pub rate: f64,
    pub seed: u64,
    pub epochs: usize,
    pub categorical_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct DropoutSummary {
    model: String,
    rate: f64,
    median: f64,
    min: f64,
    max: f64,
}

#[derive(Debug, Clone)]
pub struct DropoutReport {
    pub run_dir: PathBuf,
    pub runs: Vec<DropoutRun>,
}

impl DropoutReport {
    /// Median categorical loss of `model` at `rate` across seeds.
    pub fn median(&self, model: &str, rate: f64) -> f64 {
        let mut v: Vec<f64> = self.runs.iter().filter(|r| r.model == model && r.rate == rate).map(|r| r.categorical_loss).collect();
        median(&mut v)
    }
}

pub const PACKET_LEVEL: &str = "packet-level feedforward";
pub const SESSION_LEVEL: &str = "session-level transformer";

/// Per dropout rate and seed, trains a packet-level feedforward and a
/// session-level transformer with categorical inputs randomly blanked, and
/// records each one's validation categorical loss under the same blanking.
pub fn cmd_dropout_experiment(cfg: &RunConfig) -> Result<DropoutReport, HarnessError> {
    cfg.validate()?;
    let (sessions, _, _) = ingest(cfg.input()?)?;
    let data = Dataset::build(&sessions, cfg.mode, cfg)?;
    in_run_dir(&cfg.output_dir, "dropout-experiment", &cfg.to_toml(), &cfg.seeds, |run| {
        let mut runs = Vec::new();
        for &rate in &cfg.dropout_rates {
            for &seed in &cfg.seeds {
                for (label, arch) in [(PACKET_LEVEL, Arch::Feedforward), (SESSION_LEVEL, Arch::Transformer)] {
                    let mc = ModelConfig { arch, seed, dropout_rate: rate, missing_data: true, ..cfg.model.clone() };
                    let opts = cfg.train_options(arch);
                    let out = train_model(&mc, &data, &opts, |_| {})?;
                    let val = loss_on(&out.model, &data.schema, data.table(), &data.enc_val, opts.batch_size)?;
                    log::info!("{label} rate {rate} seed {seed}: categorical loss {:.5}", val.categorical_mean());
                    runs.push(DropoutRun {
                        model: label.to_string(),
                        rate,
                        seed,
                        epochs: out.history.len(),
                        categorical_loss: val.categorical_mean(),
                    });
                }
            }
        }
        let report = DropoutReport { run_dir: run.dir.clone(), runs };
        let mut w = csv::Writer::from_path(run.file("dropout_runs.csv"))?;
        for r in &report.runs {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(run.file("dropout_summary.csv"))?;
        let mut series = Vec::new();
        for label in [PACKET_LEVEL, SESSION_LEVEL] {
            let mut points = Vec::new();
            let mut bars = Vec::new();
            for &rate in &cfg.dropout_rates {
                let v: Vec<f64> =
                    report.runs.iter().filter(|r| r.model == label && r.rate == rate).map(|r| r.categorical_loss).collect();
                let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                let m = report.median(label, rate);
                w.serialize(DropoutSummary { model: label.to_string(), rate, median: m, min: lo, max: hi })?;
                points.push((rate, m));
                bars.push((lo, hi));
            }
            series.push(Series { label: label.to_string(), points, bars: Some(bars) });
        }
        w.flush()?;
        save_svg(run.file("dropout.svg"), "categorical loss under input dropout", "dropout rate", "categorical loss", &series)?;
        Ok(report)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructReport {
    pub sessions_in: usize,
    pub sessions_out: usize,
    pub packets_out: usize,
    pub violations_repaired: usize,
    /// Repairable violations left in the re-read output; zero unless rules
    /// were disabled.
    pub remaining_violations: usize,
}

/// Encodes, reconstructs, decodes and repairs every session of `input`, then
/// writes the result as a capture and re-reads it as a check.
pub fn cmd_reconstruct(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    violations_csv: Option<&Path>,
    disabled_rules: &[String],
) -> Result<ReconstructReport, HarnessError> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore()?;
    let spec = ConstraintSpec::without(disabled_rules)?;
    let (sessions, _, _) = ingest(input)?;
    let table = ck.embeddings.as_ref();
    let encoded = ck.schema.encode_sessions(&sessions, ck.max_len);
    let outputs = predict_eval(&model, table, &encoded, ck.batch_size)?;
    let mut packets: Vec<ParsedPacket> = Vec::new();
    let mut found = Vec::new();
    for ((session, enc), out) in sessions.iter().zip(&encoded).zip(&outputs) {
        let decoded = ck.schema.decode_outputs(out, enc.len(), session, table)?;
        let (fixed, v) = enforce(&decoded, &spec);
        found.extend(v.into_iter().map(|v| (session.id, v)));
        packets.extend(fixed.into_iter().map(|sp| sp.packet));
    }
    packets.sort_by_key(|p| p.timestamp_us());
    let result = (|| {
        write_pcap(&packets, output)?;
        if let Some(path) = violations_csv {
            save_violations_csv(path, &found)?;
        }
        let (again, _, _) = ingest(output)?;
        let remaining = again.iter().map(|s| repairable_count(&validate(&s.packets, &spec))).sum();
        Ok(ReconstructReport {
            sessions_in: sessions.len(),
            sessions_out: again.len(),
            packets_out: packets.len(),
            violations_repaired: repairable_count(&found.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>()),
            remaining_violations: remaining,
        })
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(output);
        if let Some(p) = violations_csv {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}
