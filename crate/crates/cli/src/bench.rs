//! Decode-throughput benchmark over sharing policies.
//!
//! Every variant decodes the same random source batch for a fixed number of
//! steps (the end symbol is never selected), so all variants do the same amount
//! of work apart from what sharing removes.

use std::cmp::Ordering;
use std::time::Instant;

use san_core::model::{
    decode_step_batch, log_softmax, mean_step_flops, DecodeSession, ModelConfig, ModelParams,
    SharingPolicy, BOS, FIRST_WORD,
};
use san_core::tensor::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Timings shorter than this are too close to scheduler noise to compare.
pub const MIN_WALL_SECONDS: f64 = 1e-3;

pub const BASELINE_ID: &str = "baseline";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub beams: Vec<usize>,
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub workers: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            beams: vec![1],
            batch: 8,
            src_len: 32,
            tgt_len: 64,
            workers: 1,
            repeats: 3,
            seed: 1,
        }
    }
}

impl BenchSettings {
    pub fn validate(&self, config: &ModelConfig) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.repeats < 3 {
            return usage(format!(
                "--repeats must be at least 3, got {}",
                self.repeats
            ));
        }
        if self.beams.is_empty() || self.beams.contains(&0) {
            return usage("beam sizes must be positive".into());
        }
        if self.batch == 0 || self.workers == 0 || self.src_len == 0 || self.tgt_len == 0 {
            return usage("batch, workers, source and target lengths must be positive".into());
        }
        if self.src_len > config.max_len || self.tgt_len > config.max_len {
            return usage(format!(
                "lengths {}/{} exceed the model's max_len {}",
                self.src_len, self.tgt_len, config.max_len
            ));
        }
        Ok(())
    }
}

/// Bench workload defaults: base-sized model with a 4096-word vocabulary.
pub fn bench_config() -> ModelConfig {
    ModelConfig {
        vocab: 4096,
        ..ModelConfig::base()
    }
}

/// One decoder self-attention block and two equal enc-dec blocks.
pub fn default_shared_policy(config: &ModelConfig) -> SharingPolicy {
    let m = config.dec_layers;
    let encdec = if m >= 2 {
        vec![m / 2, m - m / 2]
    } else {
        vec![1]
    };
    SharingPolicy::decoder(vec![m], encdec, config.enc_layers)
}

pub fn policy_id(policy: &SharingPolicy) -> String {
    let join = |b: &[usize]| {
        b.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join("+")
    };
    format!(
        "self:{}/encdec:{}/enc:{}",
        join(&policy.self_blocks),
        join(&policy.encdec_blocks),
        join(&policy.enc_blocks)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub policy_id: String,
    pub policy: SharingPolicy,
    pub beam: usize,
    pub batch: usize,
    pub workers: usize,
    pub tokens: u64,
    /// Median over the timed repeats.
    pub wall_seconds: f64,
    pub tokens_per_sec: f64,
    pub flops_per_token: f64,
    pub checksum: String,
    pub repeat_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub policy_id: String,
    pub beam: usize,
    /// Tokens/sec of this variant over the baseline at the same beam size.
    pub ratio: f64,
    pub flops_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfigEcho {
    pub model: ModelConfig,
    pub settings: BenchSettings,
    pub baseline: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfigEcho,
    pub records: Vec<VariantRecord>,
    pub speedups: Vec<Speedup>,
}

impl BenchReport {
    pub fn record(&self, policy_id: &str, beam: usize) -> Option<&VariantRecord> {
        self.records
            .iter()
            .find(|r| r.policy_id == policy_id && r.beam == beam)
    }
}

pub struct Variant {
    pub id: String,
    pub params: ModelParams,
}

/// Random source sentences of exactly `len` word tokens.
pub fn random_sources(config: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            (0..len)
                .map(|_| rng.below(FIRST_WORD as u64, config.vocab as u64) as u32)
                .collect()
        })
        .collect()
}

/// Decodes every source for `steps` tokens; words only, so lengths never vary.
pub fn fixed_length_decode(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    beam: usize,
    steps: usize,
) -> CliResult<Vec<Vec<u32>>> {
    if srcs.is_empty() || steps == 0 {
        return Ok(vec![Vec::new(); srcs.len()]);
    }
    if steps > params.config().max_len {
        return Err(CliError::Usage(format!(
            "cannot decode {steps} steps with max_len {}",
            params.config().max_len
        )));
    }
    let mut sessions = DecodeSession::new_batch(params, srcs)?;
    // (sentence, tokens, cumulative log-prob) per live row
    let mut hyps: Vec<(usize, Vec<u32>, f64)> =
        (0..srcs.len()).map(|s| (s, Vec::new(), 0.0)).collect();
    for _ in 0..steps {
        let feed: Vec<u32> = hyps
            .iter()
            .map(|h| h.1.last().copied().unwrap_or(BOS))
            .collect();
        let logits = decode_step_batch(&mut sessions, &feed)?;
        let mut chosen: Vec<(usize, u32, f64)> = Vec::with_capacity(hyps.len());
        let mut row = 0;
        while row < hyps.len() {
            let sentence = hyps[row].0;
            let end = (row..hyps.len())
                .find(|&r| hyps[r].0 != sentence)
                .unwrap_or(hyps.len());
            let mut cands: Vec<(f64, usize, u32)> = Vec::new();
            for r in row..end {
                let logp = if beam == 1 {
                    logits.row(r).to_vec()
                } else {
                    log_softmax(logits.row(r))
                };
                let words = &logp[FIRST_WORD as usize..];
                for (k, v) in best_k(words, beam) {
                    cands.push((hyps[r].2 + v, r, k as u32 + FIRST_WORD));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            chosen.extend(
                cands
                    .into_iter()
                    .take(beam)
                    .map(|(score, r, tok)| (r, tok, score)),
            );
            row = end;
        }
        let mut remaining = vec![0usize; hyps.len()];
        for &(p, _, _) in &chosen {
            remaining[p] += 1;
        }
        let mut parents: Vec<Option<DecodeSession<'_>>> = sessions.into_iter().map(Some).collect();
        let mut next_sessions = Vec::with_capacity(chosen.len());
        let mut next_hyps = Vec::with_capacity(chosen.len());
        for (p, tok, score) in chosen {
            remaining[p] -= 1;
            let s = if remaining[p] == 0 {
                parents[p].take()
            } else {
                parents[p].clone()
            };
            next_sessions.push(s.expect("parent session is present until its last child"));
            let mut tokens = hyps[p].1.clone();
            tokens.push(tok);
            next_hyps.push((hyps[p].0, tokens, score));
        }
        sessions = next_sessions;
        hyps = next_hyps;
    }
    // rows stay grouped by sentence in best-first order
    let mut out = vec![Vec::new(); srcs.len()];
    for (sentence, tokens, _) in hyps.into_iter().rev() {
        out[sentence] = tokens;
    }
    Ok(out)
}

/// Indices and values of the `k` largest entries, best first, ties to the lower index.
fn best_k(values: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, values[i])).collect()
}

/// Splits the sources over `workers` threads, each decoding its share as one batch.
pub fn decode_with_workers(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    beam: usize,
    steps: usize,
    workers: usize,
) -> CliResult<Vec<Vec<u32>>> {
    let workers = workers.clamp(1, srcs.len().max(1));
    if workers == 1 {
        return fixed_length_decode(params, srcs, beam, steps);
    }
    let chunk = srcs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = srcs
            .chunks(chunk)
            .map(|part| scope.spawn(move || fixed_length_decode(params, part, beam, steps)))
            .collect();
        let mut out = Vec::with_capacity(srcs.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| CliError::Verify("decode worker panicked".into()))??,
            );
        }
        Ok(out)
    })
}

pub fn checksum(outputs: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for (i, toks) in outputs.iter().enumerate() {
        h.update((i as u64).to_le_bytes());
        h.update((toks.len() as u64).to_le_bytes());
        for t in toks {
            h.update(t.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every variant at every beam size. The first variant is the baseline.
///
/// Every (beam, variant) pair is warmed up once, then the timed repeats are
/// interleaved across all pairs, alternating direction, so slow drift in
/// machine speed affects them alike.
pub fn run_bench(variants: &[Variant], settings: &BenchSettings) -> CliResult<BenchReport> {
    let Some(base) = variants.first() else {
        return Err(CliError::Usage("no variants to benchmark".into()));
    };
    let config = base.params.config().clone();
    settings.validate(&config)?;
    if variants.iter().any(|v| v.params.config() != &config) {
        return Err(CliError::Usage(
            "all variants must share one model configuration".into(),
        ));
    }
    let srcs = random_sources(&config, settings.batch, settings.src_len, settings.seed);
    let tokens = (settings.batch * settings.tgt_len) as u64;

    // cells are (beam, variant) pairs in report order
    let cells: Vec<(usize, usize)> = settings
        .beams
        .iter()
        .flat_map(|&b| (0..variants.len()).map(move |i| (b, i)))
        .collect();
    let mut sums: Vec<Option<String>> = vec![None; cells.len()];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); cells.len()];
    let mut run = |c: usize| -> CliResult<f64> {
        let (beam, i) = cells[c];
        let start = Instant::now();
        let out = decode_with_workers(
            &variants[i].params,
            &srcs,
            beam,
            settings.tgt_len,
            settings.workers,
        )?;
        let secs = start.elapsed().as_secs_f64();
        let sum = checksum(&out);
        match &sums[c] {
            Some(prev) if *prev != sum => {
                return Err(CliError::Verify(format!(
                    "variant {} at beam {beam} produced different tokens across repeats",
                    variants[i].id
                )))
            }
            Some(_) => {}
            None => sums[c] = Some(sum),
        }
        Ok(secs)
    };
    for c in 0..cells.len() {
        run(c)?;
    }
    for r in 0..settings.repeats {
        // alternate direction so drift does not line up with cell order
        let order: Vec<usize> = if r % 2 == 0 {
            (0..cells.len()).collect()
        } else {
            (0..cells.len()).rev().collect()
        };
        for c in order {
            let secs = run(c)?;
            times[c].push(secs);
        }
    }

    let mut records = Vec::with_capacity(cells.len());
    for (c, &(beam, i)) in cells.iter().enumerate() {
        let v = &variants[i];
        let wall = median(&times[c]);
        if wall < MIN_WALL_SECONDS {
            return Err(CliError::Verify(format!(
                "median time {wall:.2e} s for {} is below the {MIN_WALL_SECONDS} s timer floor; \
                 use a larger batch, longer target or bigger model",
                v.id
            )));
        }
        let policy = v.params.policy();
        records.push(VariantRecord {
            policy_id: v.id.clone(),
            policy: policy.clone(),
            beam,
            batch: settings.batch,
            workers: settings.workers,
            tokens,
            wall_seconds: wall,
            tokens_per_sec: tokens as f64 / wall,
            flops_per_token: beam as f64
                * mean_step_flops(&config, policy, settings.tgt_len, settings.src_len)?,
            checksum: sums[c].clone().unwrap_or_default(),
            repeat_seconds: times[c].clone(),
        });
    }

    let speedups = records
        .iter()
        .map(|r| {
            let b = records
                .iter()
                .find(|x| x.policy_id == base.id && x.beam == r.beam)
                .expect("baseline timed at every beam");
            Speedup {
                policy_id: r.policy_id.clone(),
                beam: r.beam,
                ratio: r.tokens_per_sec / b.tokens_per_sec,
                flops_ratio: r.flops_per_token / b.flops_per_token,
            }
        })
        .collect();
    Ok(BenchReport {
        config: BenchConfigEcho {
            model: config,
            settings: settings.clone(),
            baseline: base.id.clone(),
        },
        records,
        speedups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_k_orders_and_breaks_ties_low() {
        assert_eq!(
            best_k(&[0.1, 0.5, 0.5, 0.2], 3),
            vec![(1, 0.5), (2, 0.5), (3, 0.2)]
        );
        assert_eq!(best_k(&[1.0], 4), vec![(0, 1.0)]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn fixed_length_output_never_ends_early() {
        let mut cfg = ModelConfig::small(1, 2, 8, 2, 9);
        cfg.max_len = 10;
        let p = ModelParams::build(&cfg, &SharingPolicy::unshared(&cfg), 2).unwrap();
        let srcs = random_sources(&cfg, 3, 4, 5);
        for beam in [1, 3] {
            let out = fixed_length_decode(&p, &srcs, beam, 7).unwrap();
            assert!(out
                .iter()
                .all(|t| t.len() == 7 && t.iter().all(|&x| x >= FIRST_WORD)));
            assert_eq!(decode_with_workers(&p, &srcs, beam, 7, 2).unwrap(), out);
        }
    }
}
