use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use san_core::data::{synthetic, CorpusLine, Example, Task};
use san_core::divergence::{mu_matrix, AttnKind, JsMatrix};
use san_core::model::{
    beam_search_batch, count_params, greedy_decode_batch, save_weights, ModelConfig, ModelParams,
    SharingPolicy, EOS,
};
use san_core::policy::{
    adjacent_js, attention_corpus, find_policy, gradcheck, learn_to_share, BackwardFault,
    GradcheckConfig, GradcheckReport, PolicyConfig, PolicyFile, TrainConfig,
};
use san_core::tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{
    bench_config, default_shared_policy, policy_id, run_bench, BenchReport, BenchSettings, Variant,
    BASELINE_ID,
};
use crate::error::{CliError, CliResult};
use crate::files::{
    csv_row, fmt6, load_corpus, load_js_matrix, load_model, read_json_or_default, read_text,
    with_ext, write_text,
};

/// Turns corpus lines into analysis examples; lines without a target are
/// decoded greedily and the model's own output is analysed.
pub fn analysis_examples(
    params: &ModelParams,
    lines: &[CorpusLine],
    max_len: usize,
) -> CliResult<Vec<Example>> {
    let pending: Vec<Vec<u32>> = lines
        .iter()
        .filter(|l| l.tgt.is_none())
        .map(|l| l.src.clone())
        .collect();
    let decoded = greedy_decode_batch(params, &pending, max_len)?;
    let mut decoded = decoded.into_iter();
    Ok(lines
        .iter()
        .map(|l| {
            let tgt = match &l.tgt {
                Some(t) => t.clone(),
                None => {
                    let mut t = decoded.next().unwrap_or_default();
                    if t.last() == Some(&EOS) {
                        t.pop();
                    }
                    t
                }
            };
            Example {
                src: l.src.clone(),
                tgt,
            }
        })
        .collect())
}

fn decode_limit(params: &ModelParams, max_len: Option<usize>) -> usize {
    // the start token takes one position
    max_len.unwrap_or(params.config().max_len - 1)
}

pub fn analyze(
    model: &Path,
    corpus: &Path,
    out: &Path,
    kind: AttnKind,
    max_len: Option<usize>,
) -> CliResult<JsMatrix> {
    let params = load_model(model)?;
    let lines = load_corpus(corpus, params.config())?;
    if lines.is_empty() {
        return Err(CliError::Input(format!(
            "{}: corpus is empty",
            corpus.display()
        )));
    }
    let exs = analysis_examples(&params, &lines, decode_limit(&params, max_len))?;
    let m = san_core::divergence::js_matrix(&attention_corpus(&params, &exs, kind)?, kind)?;
    write_text(&with_ext(out, "csv"), &m.to_csv())?;
    write_text(&with_ext(out, "json"), &m.to_json()?)?;
    println!(
        "{} layers, {} sentences, kind {}",
        m.layers(),
        exs.len(),
        kind.as_str()
    );
    print!("{}", m.to_csv());
    Ok(m)
}

/// "1 | 2-6" for blocks [1, 5].
pub fn block_summary(blocks: &[usize]) -> String {
    let mut start = 1;
    let mut parts = Vec::new();
    for &b in blocks {
        let end = start + b - 1;
        parts.push(if b == 1 {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        start = end + 1;
    }
    parts.join(" | ")
}

pub struct PolicyArgs<'a> {
    pub js_self: Option<&'a Path>,
    pub js_encdec: Option<&'a Path>,
    pub model: Option<&'a Path>,
    pub corpus: Option<&'a Path>,
    pub theta_self: f64,
    pub theta_encdec: f64,
    pub max_len: Option<usize>,
    pub out: Option<&'a Path>,
}

pub fn policy(args: &PolicyArgs<'_>) -> CliResult<PolicyFile> {
    san_core::policy::check_theta("--theta-self", args.theta_self)?;
    san_core::policy::check_theta("--theta-encdec", args.theta_encdec)?;
    let (js_self, js_encdec) = match (args.model, args.corpus) {
        (Some(model), Some(corpus)) => {
            if args.js_self.is_some() || args.js_encdec.is_some() {
                return Err(CliError::Usage(
                    "give matrix files or --model/--corpus, not both".into(),
                ));
            }
            let params = load_model(model)?;
            let lines = load_corpus(corpus, params.config())?;
            let exs = analysis_examples(&params, &lines, decode_limit(&params, args.max_len))?;
            let measure = |kind| -> CliResult<JsMatrix> {
                Ok(san_core::divergence::js_matrix(
                    &attention_corpus(&params, &exs, kind)?,
                    kind,
                )?)
            };
            (
                Some(measure(AttnKind::SelfAttn)?),
                Some(measure(AttnKind::EncDec)?),
            )
        }
        (None, None) => (
            args.js_self
                .map(|p| load_js_matrix(p, AttnKind::SelfAttn))
                .transpose()?,
            args.js_encdec
                .map(|p| load_js_matrix(p, AttnKind::EncDec))
                .transpose()?,
        ),
        _ => return Err(CliError::Usage("--model and --corpus go together".into())),
    };
    if js_self.is_none() && js_encdec.is_none() {
        return Err(CliError::Usage(
            "need --js-self, --js-encdec, or --model with --corpus".into(),
        ));
    }
    let self_blocks = js_self.map(|m| find_policy(&mu_matrix(&m), args.theta_self));
    let encdec_blocks = js_encdec.map(|m| find_policy(&mu_matrix(&m), args.theta_encdec));
    if let Some(b) = &self_blocks {
        println!("self   {b:?}  layers {}", block_summary(b));
    }
    if let Some(b) = &encdec_blocks {
        println!("encdec {b:?}  layers {}", block_summary(b));
    }
    let file = PolicyFile {
        theta_self: self_blocks.as_ref().map(|_| args.theta_self),
        theta_encdec: encdec_blocks.as_ref().map(|_| args.theta_encdec),
        self_blocks,
        encdec_blocks,
        enc_blocks: None,
    };
    if let Some(out) = args.out {
        write_text(out, &file.to_json()?)?;
    }
    Ok(file)
}

fn load_policy_file(path: &Path, config: &ModelConfig) -> CliResult<SharingPolicy> {
    let file = PolicyFile::from_json(&read_text(path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(file.to_policy(config)?)
}

pub struct BenchArgs<'a> {
    pub model: Option<&'a Path>,
    pub policies: &'a [PathBuf],
    pub settings: BenchSettings,
    pub out: Option<&'a Path>,
}

pub fn bench(args: &BenchArgs<'_>) -> CliResult<BenchReport> {
    let loaded = args.model.map(load_model).transpose()?;
    let config = loaded
        .as_ref()
        .map_or_else(bench_config, |p| p.config().clone());
    let seed = args.settings.seed;
    let build = |policy: &SharingPolicy| -> CliResult<ModelParams> {
        match &loaded {
            Some(p) if p.policy() == policy => Ok(p.clone()),
            _ => Ok(ModelParams::build(&config, policy, seed)?),
        }
    };
    let mut variants = vec![Variant {
        id: BASELINE_ID.into(),
        params: build(&SharingPolicy::unshared(&config))?,
    }];
    let policies = if args.policies.is_empty() {
        vec![default_shared_policy(&config)]
    } else {
        args.policies
            .iter()
            .map(|p| load_policy_file(p, &config))
            .collect::<CliResult<_>>()?
    };
    for p in &policies {
        variants.push(Variant {
            id: policy_id(p),
            params: build(p)?,
        });
    }
    let report = run_bench(&variants, &args.settings)?;
    println!(
        "{:<44} {:>4} {:>10} {:>12} {:>8} {:>14}",
        "variant", "beam", "seconds", "tokens/sec", "speedup", "flops/token"
    );
    for (r, s) in report.records.iter().zip(&report.speedups) {
        println!(
            "{:<44} {:>4} {:>10.4} {:>12.1} {:>8.3} {:>14.0}",
            r.policy_id, r.beam, r.wall_seconds, r.tokens_per_sec, s.ratio, r.flops_per_token
        );
    }
    if let Some(out) = args.out {
        write_text(
            out,
            &serde_json::to_string_pretty(&report).map_err(san_core::Error::from)?,
        )?;
    }
    Ok(report)
}

/// Settings for the toy joint training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub task: Task,
    /// Synthetic examples, including the held-out measurement sample.
    pub examples: usize,
    pub max_sentence_len: usize,
    pub max_outer: usize,
    pub data_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let mut model = ModelConfig::small(2, 4, 32, 4, 16);
        model.max_len = 16;
        Self {
            model,
            policy: PolicyConfig::default(),
            train: TrainConfig {
                steps: 1000,
                warmup: 400,
                checkpoint_every: 100,
                ..TrainConfig::default()
            },
            task: Task::Copy,
            examples: 1000,
            max_sentence_len: 8,
            max_outer: 10,
            data_seed: 7,
        }
    }
}

pub const TOY_MODEL: &str = "model.sanw";
pub const TOY_POLICY: &str = "policy.json";
pub const TOY_LOSS: &str = "loss.csv";
pub const TOY_JS: &str = "js_curve.csv";

fn js_header(dec_layers: usize) -> String {
    let mut cells = vec!["iteration".to_string(), "step".to_string()];
    cells.extend((1..dec_layers).map(|i| format!("js_{}_{}", i, i + 1)));
    csv_row(&cells)
}

pub struct ToySummary {
    pub policy: SharingPolicy,
    /// Policy derived at each iteration, in order.
    pub derived: Vec<SharingPolicy>,
    pub converged: bool,
    pub checkpoints: usize,
}

/// Runs the joint loop and writes the model, policy, loss curve and the
/// adjacent-layer divergence curve into `out_dir`. The divergence curve is
/// rewritten at every checkpoint so it survives a failed run.
pub fn train_toy(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out_dir: &Path,
) -> CliResult<ToySummary> {
    let mut cfg: ToyConfig = read_json_or_default(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.data_seed = s;
    }
    if cfg.examples <= cfg.policy.sample_sentences {
        return Err(CliError::Usage(format!(
            "examples ({}) must exceed policy.sample_sentences ({})",
            cfg.examples, cfg.policy.sample_sentences
        )));
    }
    if cfg.max_sentence_len == 0 || cfg.max_sentence_len + 1 > cfg.model.max_len {
        return Err(CliError::Usage(
            "max_sentence_len must be positive and below model.max_len".into(),
        ));
    }
    cfg.model.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", out_dir.display())))?;
    let data = synthetic(
        cfg.task,
        &mut Rng::new(cfg.data_seed),
        cfg.examples,
        cfg.model.vocab,
        cfg.max_sentence_len,
    );
    let sample = data[data.len() - cfg.policy.sample_sentences..].to_vec();

    let js_path = out_dir.join(TOY_JS);
    let mut js_csv = js_header(cfg.model.dec_layers);
    write_text(&js_path, &js_csv)?;
    let mut observer =
        |iteration: usize, step: usize, params: &ModelParams| -> san_core::Result<()> {
            let js = adjacent_js(params, &sample)?;
            let mut cells = vec![iteration.to_string(), step.to_string()];
            cells.extend(js.into_iter().map(fmt6));
            js_csv.push_str(&csv_row(&cells));
            san_core::model::write_atomic(&js_path, js_csv.as_bytes())
        };
    let outcome = learn_to_share(
        &data,
        &cfg.model,
        &cfg.policy,
        &cfg.train,
        cfg.max_outer,
        Some(&mut observer),
    )
    .map_err(|e| match e {
        san_core::Error::Training { .. } => CliError::Verify(format!(
            "{e}; partial divergence curve kept in {}",
            js_path.display()
        )),
        other => other.into(),
    })?;

    let mut loss_csv = csv_row(&["iteration".into(), "step".into(), "loss".into()]);
    for entry in &outcome.log {
        for (i, l) in entry.losses.iter().enumerate() {
            loss_csv.push_str(&csv_row(&[
                entry.iteration.to_string(),
                (i + 1).to_string(),
                fmt6(*l),
            ]));
        }
    }
    write_text(&out_dir.join(TOY_LOSS), &loss_csv)?;
    save_weights(&outcome.params, &out_dir.join(TOY_MODEL))?;
    let file = PolicyFile::from_policy(
        &outcome.policy,
        Some(cfg.policy.theta_self),
        Some(cfg.policy.theta_encdec),
    );
    write_text(&out_dir.join(TOY_POLICY), &file.to_json()?)?;

    for entry in &outcome.log {
        let p = &entry.derived.policy;
        println!(
            "iteration {}: trained under {}, derived self {} | encdec {}",
            entry.iteration,
            policy_id(&entry.trained_under),
            block_summary(&p.self_blocks),
            block_summary(&p.encdec_blocks)
        );
    }
    println!(
        "{} after {} iterations: {}",
        if outcome.converged {
            "converged"
        } else {
            "stopped at max_outer"
        },
        outcome.log.len(),
        policy_id(&outcome.policy)
    );
    Ok(ToySummary {
        derived: outcome
            .log
            .iter()
            .map(|e| e.derived.policy.clone())
            .collect(),
        policy: outcome.policy,
        converged: outcome.converged,
        checkpoints: js_csv.lines().count() - 1,
    })
}

pub fn run_gradcheck(
    config_path: Option<&Path>,
    seed: Option<u64>,
    fault: Option<BackwardFault>,
) -> CliResult<GradcheckReport> {
    let mut cfg: GradcheckConfig = read_json_or_default(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.fault = fault;
    let report = gradcheck(&cfg)?;
    println!(
        "checked {} parameters in {} tensors",
        report.checked,
        report.tensors.len()
    );
    println!(
        "worst: {}[{}] analytic {:.9e} numeric {:.9e}",
        report.worst_param, report.worst_index, report.analytic, report.numeric
    );
    println!(
        "max relative error {:.3e} (tolerance {:.1e})",
        report.max_rel_error, cfg.tolerance
    );
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub policy: SharingPolicy,
    pub baseline: u64,
    pub with_policy: u64,
    pub savings: u64,
    pub savings_percent: f64,
    pub savings_self: u64,
    pub savings_encdec: u64,
    pub savings_enc: u64,
}

pub fn params_report(config: &ModelConfig, policy: &SharingPolicy) -> CliResult<ParamsReport> {
    policy.validate(config)?;
    let unshared = SharingPolicy::unshared(config);
    let baseline = count_params(config, &unshared)?;
    let with_policy = count_params(config, policy)?;
    let only = |f: &dyn Fn(&mut SharingPolicy)| -> CliResult<u64> {
        let mut p = unshared.clone();
        f(&mut p);
        Ok(baseline - count_params(config, &p)?)
    };
    let savings = baseline - with_policy;
    Ok(ParamsReport {
        policy: policy.clone(),
        baseline,
        with_policy,
        savings,
        savings_percent: 100.0 * savings as f64 / baseline as f64,
        savings_self: only(&|p| p.self_blocks = policy.self_blocks.clone())?,
        savings_encdec: only(&|p| p.encdec_blocks = policy.encdec_blocks.clone())?,
        savings_enc: only(&|p| p.enc_blocks = policy.enc_blocks.clone())?,
    })
}

pub fn params(
    model: Option<&Path>,
    config_path: Option<&Path>,
    policy_path: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<ParamsReport> {
    let (config, model_policy) = match model {
        Some(m) => {
            if config_path.is_some() {
                return Err(CliError::Usage(
                    "--model already fixes the configuration".into(),
                ));
            }
            let p = load_model(m)?;
            (p.config().clone(), Some(p.policy().clone()))
        }
        None => (read_json_or_default::<ConfigFile>(config_path)?.0, None),
    };
    let policy = match (policy_path, model_policy) {
        (Some(p), _) => load_policy_file(p, &config)?,
        (None, Some(p)) => p,
        (None, None) => SharingPolicy::unshared(&config),
    };
    let r = params_report(&config, &policy)?;
    let mut table = String::new();
    let _ = writeln!(table, "policy          {}", policy_id(&policy));
    let _ = writeln!(table, "baseline        {:>14}", r.baseline);
    let _ = writeln!(table, "with policy     {:>14}", r.with_policy);
    let _ = writeln!(
        table,
        "savings         {:>14}  ({:.2}%)",
        r.savings, r.savings_percent
    );
    let _ = writeln!(table, "  self          {:>14}", r.savings_self);
    let _ = writeln!(table, "  encdec        {:>14}", r.savings_encdec);
    let _ = writeln!(table, "  enc           {:>14}", r.savings_enc);
    print!("{table}");
    let json = serde_json::to_string_pretty(&r).map_err(san_core::Error::from)?;
    match out {
        Some(o) => write_text(o, &json)?,
        None => println!("{json}"),
    }
    Ok(r)
}

/// A model configuration file; absent means the base configuration.
#[derive(Deserialize)]
#[serde(transparent)]
struct ConfigFile(ModelConfig);

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile(ModelConfig::base())
    }
}

pub struct DecodeArgs<'a> {
    pub model: &'a Path,
    pub corpus: &'a Path,
    pub beam: usize,
    pub batch: usize,
    pub workers: usize,
    pub max_len: Option<usize>,
    pub out: Option<&'a Path>,
}

/// Decodes every corpus source; output lines carry the source and the
/// hypothesis without the end symbol.
pub fn decode(args: &DecodeArgs<'_>) -> CliResult<Vec<CorpusLine>> {
    if args.beam == 0 || args.batch == 0 || args.workers == 0 {
        return Err(CliError::Usage(
            "--beam, --batch and --workers must be positive".into(),
        ));
    }
    let params = load_model(args.model)?;
    let lines = load_corpus(args.corpus, params.config())?;
    let limit = decode_limit(&params, args.max_len);
    let srcs: Vec<Vec<u32>> = lines.iter().map(|l| l.src.clone()).collect();
    let run = |part: &[Vec<u32>]| -> CliResult<Vec<Vec<u32>>> {
        let mut out = Vec::with_capacity(part.len());
        for chunk in part.chunks(args.batch) {
            if args.beam == 1 {
                out.extend(greedy_decode_batch(&params, chunk, limit)?);
            } else {
                out.extend(
                    beam_search_batch(&params, chunk, args.beam, limit)?
                        .into_iter()
                        .map(|h| h.tokens),
                );
            }
        }
        Ok(out)
    };
    let per_worker = srcs.len().div_ceil(args.workers).max(1);
    let outputs: Vec<Vec<u32>> = std::thread::scope(|scope| {
        let handles: Vec<_> = srcs
            .chunks(per_worker)
            .map(|part| scope.spawn(move || run(part)))
            .collect();
        let mut all = Vec::with_capacity(srcs.len());
        for h in handles {
            all.extend(
                h.join()
                    .map_err(|_| CliError::Verify("decode worker panicked".into()))??,
            );
        }
        Ok::<_, CliError>(all)
    })?;
    let result: Vec<CorpusLine> = srcs
        .into_iter()
        .zip(outputs)
        .map(|(src, mut tgt)| {
            if tgt.last() == Some(&EOS) {
                tgt.pop();
            }
            CorpusLine {
                src,
                tgt: Some(tgt),
            }
        })
        .collect();
    let text = san_core::data::to_jsonl(&result)?;
    match args.out {
        Some(o) => write_text(o, &text)?,
        None => print!("{text}"),
    }
    Ok(result)
}
