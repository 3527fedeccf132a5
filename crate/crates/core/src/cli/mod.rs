//! The `fbs` command line: train, generate, bench, label, analyze, verify.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backbone::{greedy_generate, load_checkpoint, save_checkpoint, ForwardOptions, GateMode, Generation, Model};
use crate::chunk::{bios_macro_f1, boundary_f1, format_label_dump, parse_label_dump, weak_label};
use crate::conformance::{report, run_battery, BatteryConfig};
use crate::error::{FbsError, Result};
use crate::harness::{sweep_csv, tau_sweep, tflops_rel, TimingProtocol};
use crate::paw::WindowMode;
use crate::skipgate::GatePolicyConfig;
use crate::stats::tables::{analyze_cells, cells_csv, parse_cells, AnalysisConfig, CellRecord};
use crate::textdata::{encode, encode_bytes, read_lexicon, read_spans, synth_corpus};
use crate::training::{metrics_csv, train_loop, Config, LabeledCorpus};

#[derive(Parser, Debug)]
#[command(name = "fbs", version, about = "Desk-scale FBS transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateChoice {
    Threshold,
    Off,
    AllSkip,
    Sampled,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the synthetic corpus described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (defaults to `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Greedy generation from a prompt file.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long)]
        gen_len: usize,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        /// Fixed preview span instead of the predicted one.
        #[arg(long)]
        fixed_k: Option<usize>,
        #[arg(long, value_enum, default_value_t = GateChoice::Threshold)]
        gate_mode: GateChoice,
        /// Protect structure tokens with the stricter threshold.
        #[arg(long)]
        safety: bool,
        /// Gate policy from a config file (never-skip layers, protection).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `trace.csv` and `cells.csv`.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Timing and compute sweep over thresholds.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.8,0.7")]
        tau_sweep: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Weak BIOS labels from text, segmentation spans and an idiom lexicon.
    Label {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        spans: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gold label dump to score against.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Mechanism statistics over cell dumps.
    Analyze {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the no-leakage and cache-consistency battery.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 50)]
        prompts: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Short machine-readable class of an error.
pub fn error_kind(e: &FbsError) -> &'static str {
    match e {
        FbsError::Shape(_) => "shape",
        FbsError::InvalidInput(_) => "invalid_input",
        FbsError::Parse { .. } => "parse",
        FbsError::NonFinite(_) => "non_finite",
        FbsError::Checkpoint(_) => "checkpoint",
        FbsError::Config(_) => "config",
        FbsError::Divergence { .. } => "divergence",
        FbsError::Stats(_) => "stats",
        FbsError::Io(_) => "io",
        FbsError::Json(_) => "json",
    }
}

/// `error kind=<kind> msg=<json string>`.
pub fn error_line(e: &FbsError) -> String {
    format!("error kind={} msg={}", error_kind(e), serde_json::Value::String(e.to_string()))
}

/// Parses `argv` (program name first) and runs the command. Usage errors
/// exit with 2, runtime errors with 1, battery failures with 3.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

fn policy_for(model: &Model, config: Option<&Path>) -> Result<GatePolicyConfig> {
    match config {
        Some(p) => {
            let cfg = Config::from_json(&fs::read_to_string(p)?)?;
            cfg.gate.validate(model.cfg.n_layers)?;
            Ok(cfg.gate)
        }
        None => Ok(GatePolicyConfig::for_layers(model.cfg.n_layers)),
    }
}

/// Cell records of a generation, with the fed token of each step.
pub fn generation_cells(prompt: &[usize], gen: &Generation, run: usize) -> Vec<CellRecord> {
    let mut out = Vec::new();
    for (step, cells) in gen.cells.iter().enumerate() {
        let token = if step == 0 { prompt[prompt.len() - 1] } else { gen.tokens[step - 1] };
        for (l, c) in cells.iter().enumerate() {
            out.push(CellRecord {
                run,
                step,
                layer: l + 1,
                p: c.p,
                g: c.skipped as u8,
                reason: c.reason,
                energy: c.energy,
                token,
            });
        }
    }
    out
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, out, metrics } => {
            let cfg = Config::from_json(&fs::read_to_string(&config)?)?;
            let t = &cfg.train;
            let corpus = LabeledCorpus::synthetic(t.corpus_seed, t.corpus_tokens, t.pattern_rate);
            let outcome = train_loop(&cfg, &corpus, |r| {
                if r.step % 100 == 0 {
                    eprintln!("step {} lm {:.4} total {:.4}", r.step, r.lm, r.total);
                }
            })?;
            save_checkpoint(&outcome.model, &out)?;
            let mpath = metrics.unwrap_or_else(|| out.with_extension("metrics.csv"));
            fs::write(&mpath, metrics_csv(&outcome.metrics))?;
            println!("checkpoint {} metrics {}", out.display(), mpath.display());
        }
        Command::Generate {
            ckpt,
            prompt_file,
            gen_len,
            tau,
            fixed_k,
            gate_mode,
            safety,
            config,
            dump,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let mut policy = policy_for(&model, config.as_deref())?;
            policy.tau = tau;
            policy.protect |= safety;
            let mut opts = ForwardOptions::full(policy.clone());
            if let Some(k) = fixed_k {
                opts.paw = Some(WindowMode::Fixed(k));
            }
            opts.gate = match gate_mode {
                GateChoice::Threshold => GateMode::Threshold,
                GateChoice::Off => GateMode::Off,
                GateChoice::AllSkip => GateMode::AllSkip,
                GateChoice::Sampled => GateMode::Sampled { seed: policy.seed },
            };
            let prompt = encode_bytes(&fs::read(&prompt_file)?)?.ids;
            let gen = greedy_generate(&model, &prompt, gen_len, &opts)?;
            println!("{}", crate::textdata::decode_lossy(&gen.tokens));
            eprintln!(
                "skip_ratio {:.4} tflops_rel {:.4}",
                gen.trace.skip_ratio(),
                tflops_rel(&gen.ledger, false)?
            );
            if let Some(dir) = dump {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("trace.csv"), gen.trace.to_csv())?;
                fs::write(dir.join("cells.csv"), cells_csv(&generation_cells(&prompt, &gen, 0)))?;
            }
        }
        Command::Bench {
            ckpt,
            profile,
            tau_sweep: taus,
            out,
            prompts,
            seed,
            config,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let protocol = TimingProtocol::profile(&profile)?;
            let policy = policy_for(&model, config.as_deref())?;
            let base = ForwardOptions::full(policy);
            let prompt_set = bench_prompts(seed, prompts, protocol.prompt_len);
            let rows = tau_sweep(&model, &prompt_set, &taus, &protocol, &base)?;
            fs::create_dir_all(&out)?;
            let table = sweep_csv(&rows);
            fs::write(out.join("sweep.csv"), &table)?;
            print!("{table}");
            for &tau in &taus {
                let mut opts = base.clone();
                opts.policy.tau = tau;
                let mut cells = Vec::new();
                for (i, p) in prompt_set.iter().enumerate() {
                    let gen = greedy_generate(&model, p, protocol.gen_len, &opts)?;
                    cells.extend(generation_cells(p, &gen, i));
                }
                fs::write(out.join(format!("cells_tau{tau}.csv")), cells_csv(&cells))?;
            }
        }
        Command::Label {
            text,
            spans,
            lexicon,
            out,
            gold,
        } => {
            let body = fs::read_to_string(&text)?;
            let seg = read_spans(&spans, body.len())?;
            let (lex, _) = read_lexicon(&lexicon)?;
            let toks = encode(&body);
            let rep = weak_label(&body, &seg, &lex, &toks)?;
            fs::write(&out, format_label_dump(&rep.labels))?;
            println!(
                "tokens {} chunks {} idioms {} overridden {} filtered {} coverage {:.4}",
                rep.labels.len(),
                rep.retained.len(),
                rep.idioms_accepted,
                rep.segments_overridden,
                rep.segments_filtered,
                rep.coverage
            );
            if let Some(g) = gold {
                let gold_labels = parse_label_dump(&fs::read_to_string(&g)?, &g.display().to_string())?;
                let f1 = bios_macro_f1(&rep.labels, &gold_labels)?;
                let bf = boundary_f1(&rep.labels, &gold_labels)?;
                println!("macro_f1 {:.4} boundary_f1 {:.4}", f1, bf.f1);
            }
        }
        Command::Analyze {
            traces,
            out,
            resamples,
            seed,
        } => {
            let mut files: Vec<PathBuf> = fs::read_dir(&traces)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("cells") && n.ends_with(".csv"))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(FbsError::invalid(format!("no cells*.csv dumps in {}", traces.display())));
            }
            let mut cells = Vec::new();
            for (run, f) in files.iter().enumerate() {
                cells.extend(parse_cells(&fs::read_to_string(f)?, &f.display().to_string(), run)?);
            }
            let cfg = AnalysisConfig {
                resamples,
                seed,
                ..AnalysisConfig::default()
            };
            fs::create_dir_all(&out)?;
            for (name, table) in analyze_cells(&cells, &cfg)? {
                fs::write(out.join(name), table.to_csv())?;
                println!("{}", out.join(name).display());
            }
        }
        Command::Verify {
            ckpt,
            config,
            pairs,
            prompts,
            steps,
            seed,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let policy = policy_for(&model, config.as_deref())?;
            let cfg = BatteryConfig {
                pairs,
                prompts,
                steps,
                seed,
                ..BatteryConfig::default()
            };
            let cases = run_battery(&model, &policy, &cfg)?;
            print!("{}", report(&cases));
            if cases.iter().any(|c| !c.pass) {
                eprintln!("error kind=battery msg=\"conformance battery failed\"");
                return Ok(3);
            }
        }
    }
    Ok(0)
}

/// Deterministic prompts cut from synthetic text.
pub fn bench_prompts(seed: u64, n: usize, len: usize) -> Vec<Vec<usize>> {
    let text = synth_corpus(seed, n * len, 0.3).text;
    let ids = encode(&text).ids;
    ids.chunks(len).take(n).map(|c| c.to_vec()).collect()
}
