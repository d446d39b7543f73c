use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metadmoe::checkpoint;
use metadmoe::evalkit::{embedding_dump, Method};
use metadmoe::metatrain::curve_csv;
use metadmoe::privacy::{run_privacy_experiment, split_privacy};
use metadmoe::runner::{
    arm_bn_baseline, baseline_from_groups, baseline_groups, build_experts, checkpoint_hash,
    embeddings_csv, emit_report, eval_config, evaluate_all, expert_groups, experts_from_groups,
    generate_data, load_model, meta_stage, new_record, run_ablation, run_pipeline_on, save_model,
    warm_start, AblationSpec, Axis, ExperimentConfig, PhaseTimes, RunRecord,
};
use metadmoe::synthdata::{read_registry, write_registry, DomainRegistry, SuperDomainMap};
use metadmoe::Error;

#[derive(Parser)]
#[command(
    name = "metadmoe",
    version,
    about = "Meta-distillation of domain experts for test-time adaptation"
)]
struct Cli {
    /// TOML experiment configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Fail instead of warning when a target domain is smaller than n_su.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `gen-data`; regenerated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark into OUT/data.
    GenData,
    /// Cluster source domains and train one expert per super-domain into OUT/experts.
    TrainExperts(DataArg),
    /// ERM student and supervised aggregator warm start into OUT/pretrain.
    Pretrain(DataArg),
    /// Episodic meta-training from OUT/pretrain into OUT/meta.
    MetaTrain(DataArg),
    /// Test-time adaptation and evaluation of every configured method.
    AdaptEval {
        #[command(flatten)]
        data: DataArg,
        /// Model checkpoint directory (OUT/meta by default).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// All stages end to end.
    Run(DataArg),
    /// Sweep one ablation axis over values and seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Privacy-regulated run: private experts, public meta-training.
    PrivacyRun(DataArg),
    /// Tables and plots from run records.
    Report {
        /// `records.json`, single record files or directories containing them.
        inputs: Vec<PathBuf>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> metadmoe::Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> metadmoe::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> metadmoe::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn load_config(cli: &Cli) -> metadmoe::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.strict {
        cfg.eval.strict = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn registry(cfg: &ExperimentConfig, data: &DataArg) -> metadmoe::Result<DomainRegistry> {
    match &data.data {
        Some(dir) => read_registry(dir),
        None => generate_data(cfg),
    }
}

fn save_record(out: &Path, record: &RunRecord) -> metadmoe::Result<()> {
    write_json(&out.join("record.json"), record)
}

fn print_reports(record: &RunRecord) {
    for (method, r) in &record.reports {
        let acc = r
            .accuracy
            .map(|v| format!("{:.2}", 100.0 * v))
            .unwrap_or_else(|| "-".into());
        let f1 = r
            .macro_f1
            .map(|v| format!("{:.2}", 100.0 * v))
            .unwrap_or_else(|| "-".into());
        let pr = r
            .pearson_r
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{method:<18} acc {acc:>6}  macro_f1 {f1:>6}  r {pr:>6}  scored {}",
            r.num_scored
        );
    }
}

fn run(cli: &Cli) -> metadmoe::Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::GenData => {
            let reg = generate_data(&cfg)?;
            write_registry(&reg, &out.join("data"))?;
            println!(
                "wrote {} domains ({} source, {} val, {} test) to {}",
                reg.domains.len(),
                reg.source_ids().len(),
                reg.val_ids().len(),
                reg.test_ids().len(),
                out.join("data").display()
            );
        }
        Cmd::TrainExperts(d) => {
            let reg = registry(&cfg, d)?;
            let (map, experts) = build_experts(&cfg, &reg, &reg, &reg.source_ids())?;
            let config =
                serde_json::to_value(&cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let m = checkpoint::save(
                &out.join("experts"),
                "experts",
                cfg.seed,
                0,
                config,
                &expert_groups(&experts),
            )?;
            write_json(&out.join("experts").join("super_domains.json"), &map)?;
            println!(
                "trained {} experts, checkpoint {}",
                experts.len(),
                m.content_hash
            );
        }
        Cmd::Pretrain(d) => {
            let reg = registry(&cfg, d)?;
            let (_, groups) = checkpoint::load(&out.join("experts"))?;
            let experts = experts_from_groups(&cfg, &groups)?;
            let map: SuperDomainMap = read_json(&out.join("experts").join("super_domains.json"))?;
            let warm = warm_start(&cfg, &reg, &reg.source_ids(), experts, Some(&map))?;
            let hash = save_model(&out.join("pretrain"), &cfg, &warm.model, 0)?;
            if let Some(b) = &warm.erm {
                checkpoint::save(
                    &out.join("erm"),
                    "erm",
                    cfg.seed,
                    0,
                    serde_json::Value::Null,
                    &baseline_groups(b),
                )?;
            }
            println!("warm start checkpoint {hash}");
        }
        Cmd::MetaTrain(d) => {
            let reg = registry(&cfg, d)?;
            let (_, model) = load_model(&out.join("pretrain"))?;
            let map: SuperDomainMap = read_json(&out.join("experts").join("super_domains.json"))?;
            let state = meta_stage(
                &cfg,
                &reg,
                &reg.source_ids(),
                Some(&map),
                model,
                &reg.val_ids(),
            )?;
            let hash = save_model(
                &out.join("meta"),
                &cfg,
                &state.model,
                state.counters.meta_steps as u64,
            )?;
            write_text(
                &out.join("meta").join("curve.csv"),
                &curve_csv(&state.curve),
            )?;
            write_json(&out.join("meta").join("mask_log.json"), &state.mask_log)?;
            write_json(&out.join("meta").join("counters.json"), &state.counters)?;
            println!(
                "{} meta steps, best epoch {:?}, checkpoint {hash}",
                state.counters.meta_steps, state.best_epoch
            );
        }
        Cmd::AdaptEval { data, model } => {
            let reg = registry(&cfg, data)?;
            let dir = model.clone().unwrap_or_else(|| out.join("meta"));
            let (_, m) = load_model(&dir)?;
            let src = reg.source_ids();
            let erm_dir = out.join("erm");
            let erm = if erm_dir.join(checkpoint::MANIFEST).exists() {
                let (_, g) = checkpoint::load(&erm_dir)?;
                Some(baseline_from_groups(cfg.student_config()?, &g)?)
            } else if cfg.eval.methods.contains(&Method::Erm) {
                Some(metadmoe::runner::erm_baseline(&cfg, &reg, &src)?)
            } else {
                None
            };
            let arm = if cfg.eval.methods.contains(&Method::ArmBn) {
                Some(arm_bn_baseline(&cfg, &reg, &src)?)
            } else {
                None
            };
            let test = reg.test_ids();
            let mut times = PhaseTimes::default();
            let reports = times.time("eval", || {
                evaluate_all(&cfg, &reg, &test, &m, erm.as_ref(), arm.as_ref())
            })?;
            let mut record = new_record(&cfg, "adapt_eval");
            record.reports = reports;
            record.checkpoint_hash = checkpoint_hash(&m);
            record.phase_seconds = times;
            if cfg.eval.embeddings {
                let dump = embedding_dump(&m, &reg, &test, &cfg.adapt, &eval_config(&cfg, "eval"))?;
                write_text(&out.join("embeddings.csv"), &embeddings_csv(&dump))?;
            }
            print_reports(&record);
            save_record(out, &record)?;
        }
        Cmd::Run(d) => {
            let mut times = PhaseTimes::default();
            let reg = times.time("data", || registry(&cfg, d))?;
            let o = run_pipeline_on(&cfg, &reg)?;
            let mut record = o.record;
            record.phase_seconds.0.extend(times.0);
            save_model(
                &out.join("meta"),
                &cfg,
                &o.model,
                record.counters.meta_steps as u64,
            )?;
            write_text(
                &out.join("meta").join("curve.csv"),
                &curve_csv(&record.curve),
            )?;
            if let Some(dump) = &o.embeddings {
                write_text(&out.join("embeddings.csv"), &embeddings_csv(dump))?;
            }
            print_reports(&record);
            println!("runtime {:.1}s", record.phase_seconds.total());
            save_record(out, &record)?;
        }
        Cmd::Ablate {
            axis,
            values,
            repeats,
        } => {
            let spec = AblationSpec {
                axis: Axis::parse(axis)?,
                values: values.clone(),
                repeats: *repeats,
            };
            let res = run_ablation(&spec, &cfg)?;
            write_json(&out.join("failures.json"), &res.failures)?;
            if res.records.is_empty() {
                return Err(Error::Empty("ablation produced no successful runs"));
            }
            for p in emit_report(&res.records, out)? {
                println!("wrote {}", p.display());
            }
            if !res.failures.is_empty() {
                eprintln!("{} cells failed, see failures.json", res.failures.len());
            }
        }
        Cmd::PrivacyRun(d) => {
            let reg = registry(&cfg, d)?;
            let split = split_privacy(
                &reg,
                cfg.privacy.fraction_private,
                cfg.phase_seed("privacy-split"),
            )?;
            let o = run_privacy_experiment(&reg, &split, &cfg)?;
            write_json(&out.join("privacy_split.json"), &o.split)?;
            write_json(&out.join("audit_log.json"), &o.record.audit_log)?;
            print_reports(&o.record);
            println!(
                "audit: {} reads, {} private reads after expert pretraining",
                o.record.audit_log.len(),
                o.record
                    .audit_log
                    .iter()
                    .filter(|r| r.private && r.phase != metadmoe::privacy::Phase::ExpertPretraining)
                    .count()
            );
            save_record(out, &o.record)?;
        }
        Cmd::Report { inputs } => {
            let mut records = Vec::new();
            for p in inputs {
                collect_records(p, &mut records)?;
            }
            for p in emit_report(&records, out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn collect_records(path: &Path, records: &mut Vec<RunRecord>) -> metadmoe::Result<()> {
    if path.is_dir() {
        for name in ["records.json", "record.json"] {
            let p = path.join(name);
            if p.exists() {
                return collect_records(&p, records);
            }
        }
        return Err(Error::InvalidArgument(format!(
            "no record files in {}",
            path.display()
        )));
    }
    let value: serde_json::Value = read_json(path)?;
    if value.is_array() {
        let rs: Vec<RunRecord> =
            serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))?;
        records.extend(rs);
    } else {
        records
            .push(serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                }
            });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
