//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! straight to standard output so it shows up even when output is captured.
//! The criteria run one at a time so the timed ones see an idle machine.

use std::f64::consts::LN_2;
use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use san_attn::bench::{run_bench, BenchReport, BenchSettings, Variant, BASELINE_ID};
use san_attn::commands::{self, ToyConfig};
use san_core::attention::AttnWeights;
use san_core::divergence::{block_sim, js, js_matrix, mu_matrix, AttnKind, JsMatrix};
use san_core::model::{
    baseline_forward, count_params, decode_step, decode_weights, encode_weights,
    estimate_source_flops, estimate_step_flops, forward_teacher, load_weights, save_weights,
    DecodeSession, ModelConfig, ModelParams, SharingPolicy, BOS,
};
use san_core::policy::{
    find_policy, gradcheck, loss_and_grads, GradOptions, GradcheckConfig, PolicyFile,
};
use san_core::tensor::{Mat, Rng};

static SERIAL: Mutex<()> = Mutex::new(());

const FIG2_SELF: [[f64; 6]; 6] = [
    [0.0000, 0.5429, 0.5138, 0.4650, 0.5005, 0.5531],
    [0.5429, 0.0000, 0.0606, 0.0630, 0.0703, 0.0332],
    [0.5138, 0.0606, 0.0000, 0.0671, 0.0472, 0.0296],
    [0.4650, 0.0630, 0.0671, 0.0000, 0.0176, 0.0552],
    [0.5005, 0.0703, 0.0472, 0.0176, 0.0000, 0.0389],
    [0.5531, 0.0332, 0.0296, 0.0552, 0.0389, 0.0000],
];

struct Criterion {
    id: u32,
    title: &'static str,
    limit_secs: Option<f64>,
    start: Instant,
    notes: Vec<String>,
    failures: Vec<String>,
    done: bool,
    _serial: MutexGuard<'static, ()>,
}

impl Criterion {
    fn start(id: u32, title: &'static str, limit_secs: Option<f64>) -> Self {
        let serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        Self {
            id,
            title,
            limit_secs,
            start: Instant::now(),
            notes: Vec::new(),
            failures: Vec::new(),
            done: false,
            _serial: serial,
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn line(&self, verdict: &str, detail: &str) {
        let secs = self.start.elapsed().as_secs_f64();
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "acceptance criterion {:>2} {verdict}: {} [{secs:.1} s] {detail}",
            self.id, self.title
        );
    }

    fn finish(mut self) {
        let secs = self.start.elapsed().as_secs_f64();
        if let Some(limit) = self.limit_secs {
            self.check(secs < limit, format!("took {secs:.1} s, limit {limit} s"));
        }
        self.done = true;
        if self.failures.is_empty() {
            self.line("PASS", &self.notes.join("; "));
        } else {
            self.line("FAIL", &self.failures.join("; "));
            panic!("criterion {} failed: {}", self.id, self.failures.join("; "));
        }
    }
}

impl Drop for Criterion {
    fn drop(&mut self) {
        if !self.done {
            self.line("FAIL", "aborted by a panic");
        }
    }
}

fn random_model(cfg: &ModelConfig, policy: &SharingPolicy, seed: u64) -> ModelParams {
    let mut p = ModelParams::build(cfg, policy, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xacce);
    for m in p.weights_mut().leaves_mut() {
        if m.rows() == 1 {
            for v in m.as_mut_slice() {
                *v += 0.2 * rng.normal();
            }
        }
    }
    p
}

fn tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.below(3, vocab as u64) as u32)
        .collect()
}

#[test]
fn criterion_01_sharing_no_op_equivalence() {
    let mut c = Criterion::start(
        1,
        "all-ones policy matches the unshared baseline",
        Some(10.0),
    );
    let mut rng = Rng::new(1);
    let mut worst = 0.0f64;
    for enc in 1..=6 {
        for dec in 1..=6 {
            let cfg = ModelConfig::small(enc, dec, 16, 4, 23);
            let p = random_model(
                &cfg,
                &SharingPolicy::unshared(&cfg),
                (enc * 10 + dec) as u64,
            );
            let src = tokens(&mut rng, 1 + (enc + dec) % 7, 23);
            let mut tgt = vec![BOS];
            tgt.extend(tokens(&mut rng, 1 + (enc * dec) % 8, 23));
            let fast = forward_teacher(&p, &src, &tgt).unwrap().logits;
            let naive = baseline_forward(&p, &src, &tgt).unwrap();
            worst = worst.max(fast.max_abs_diff(&naive));
        }
    }
    c.check(worst <= 1e-12, format!("max |diff| {worst:.3e} > 1e-12"));
    c.note(format!(
        "36 configs up to 6+6 layers, max |diff| {worst:.2e}"
    ));
    c.finish();
}

#[test]
fn criterion_02_cache_equivalence() {
    let mut c = Criterion::start(2, "cached decoding matches teacher forcing", Some(30.0));
    let cfg = ModelConfig::small(2, 6, 32, 4, 29);
    let unit = vec![1; 6];
    let mut policies = Vec::new();
    for blocks in [vec![1, 1, 1, 1, 1, 1], vec![6], vec![3, 3], vec![2, 2, 2]] {
        policies.push(SharingPolicy::decoder(blocks.clone(), unit.clone(), 2));
        policies.push(SharingPolicy::decoder(unit.clone(), blocks.clone(), 2));
        policies.push(SharingPolicy::decoder(blocks.clone(), blocks, 2));
    }
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    for (i, policy) in policies.iter().enumerate() {
        let p = random_model(&cfg, policy, 40 + i as u64);
        for _ in 0..3 {
            let src = {
                let n = 1 + rng.below(0, 12) as usize;
                tokens(&mut rng, n, 29)
            };
            let mut tgt = vec![BOS];
            tgt.extend({
                let n = rng.below(0, 16) as usize;
                tokens(&mut rng, n, 29)
            });
            let teacher = forward_teacher(&p, &src, &tgt).unwrap().logits;
            let mut s = DecodeSession::new(&p, &src).unwrap();
            for (pos, &tok) in tgt.iter().enumerate() {
                let row = decode_step(&mut s, tok).unwrap();
                for (a, b) in row.iter().zip(teacher.row(pos)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    c.check(worst <= 1e-9, format!("max |diff| {worst:.3e} > 1e-9"));
    c.note(format!(
        "{} policies on self, enc-dec and both, max |diff| {worst:.2e}",
        policies.len()
    ));
    c.finish();
}

fn random_dist(rng: &mut Rng, n: usize, sparse: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            if sparse && i % 3 == 1 {
                0.0
            } else {
                rng.uniform() + 1e-6
            }
        })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

#[test]
fn criterion_03_js_suite() {
    let mut c = Criterion::start(3, "divergence properties", None);
    let mut rng = Rng::new(3);
    let mut max_self = 0.0f64;
    for i in 0..2000 {
        let n = 1 + i % 17;
        let (p, q) = (
            random_dist(&mut rng, n, i % 2 == 0),
            random_dist(&mut rng, n, i % 3 == 0),
        );
        let (pq, qp) = (js(&p, &q).unwrap(), js(&q, &p).unwrap());
        c.check(pq == qp, format!("js not symmetric: {pq} vs {qp}"));
        c.check(
            (0.0..=LN_2 + 1e-12).contains(&pq),
            format!("js {pq} outside [0, ln 2]"),
        );
        max_self = max_self.max(js(&p, &p).unwrap());
    }
    c.check(max_self <= 1e-12, format!("js(P,P) up to {max_self:.3e}"));
    // ½ KL(P‖M) + ½ KL(Q‖M) with M = (0.75, 0.25)
    let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
        + 0.5 * (1.0f64 / 0.75).ln();
    let v = js(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
    c.check(
        (v - 0.215762).abs() <= 1e-6 && (v - oracle).abs() <= 1e-12,
        format!("js([.5,.5],[1,0]) = {v}"),
    );

    let cfg = ModelConfig::small(2, 4, 16, 2, 19);
    let p = random_model(&cfg, &SharingPolicy::unshared(&cfg), 3);
    let corpus: Vec<Vec<AttnWeights>> = (0..6)
        .map(|_| {
            let src = {
                let n = 1 + rng.below(0, 9) as usize;
                tokens(&mut rng, n, 19)
            };
            let mut tgt = vec![BOS];
            tgt.extend({
                let n = rng.below(0, 9) as usize;
                tokens(&mut rng, n, 19)
            });
            forward_teacher(&p, &src, &tgt).unwrap().self_weights
        })
        .collect();
    let m = js_matrix(&corpus, AttnKind::SelfAttn).unwrap();
    for i in 0..4 {
        c.check(
            m.get(i, i) == 0.0,
            format!("diagonal {i} is {}", m.get(i, i)),
        );
        for j in 0..4 {
            c.check(
                m.get(i, j) == m.get(j, i),
                format!("matrix asymmetric at ({i},{j})"),
            );
        }
    }
    let mut shuffled = corpus.clone();
    shuffled.rotate_left(2);
    shuffled.swap(0, 3);
    c.check(
        js_matrix(&shuffled, AttnKind::SelfAttn).unwrap() == m,
        "sentence order changed the matrix",
    );
    c.note(format!(
        "js([.5,.5],[1,0]) = {v:.6}, max js(P,P) {max_self:.1e}"
    ));
    c.finish();
}

#[test]
fn criterion_04_policy_from_published_values() {
    let mut c = Criterion::start(4, "published self-attention divergences give {1,5}", None);
    let rows: Vec<Vec<f64>> = FIG2_SELF.iter().map(|r| r.to_vec()).collect();
    let m = JsMatrix::new(AttnKind::SelfAttn, Mat::from_rows(&rows).unwrap()).unwrap();
    let mu = mu_matrix(&m);
    let policy = find_policy(&mu, 0.35);
    c.check(policy == vec![1, 5], format!("policy {policy:?}"));
    // mean of ln 2 − JS over the ten distinct pairs among layers 2..6
    let mut sum = 0.0;
    let mut n = 0;
    for i in 1..6 {
        for j in i + 1..6 {
            sum += LN_2 - FIG2_SELF[i][j];
            n += 1;
        }
    }
    let oracle = sum / n as f64;
    let sim = block_sim(&mu, 1, 5).unwrap();
    c.check((sim - 0.644877).abs() <= 1e-5, format!("sim(2,6) = {sim}"));
    c.check(
        (sim - oracle).abs() <= 1e-12,
        format!("sim(2,6) {sim} vs oracle {oracle}"),
    );
    c.note(format!("policy {policy:?}, sim(2,6) = {sim:.6}"));
    c.finish();
}

#[test]
fn criterion_05_parameter_accounting() {
    let mut c = Criterion::start(
        5,
        "exact projection savings at the base configuration",
        None,
    );
    let cfg = ModelConfig::base();
    let d = cfg.d_model as u64;
    let base = count_params(&cfg, &SharingPolicy::unshared(&cfg)).unwrap();
    let self6 = base - count_params(&cfg, &SharingPolicy::decoder(vec![6], vec![1; 6], 6)).unwrap();
    let encdec33 =
        base - count_params(&cfg, &SharingPolicy::decoder(vec![1; 6], vec![3, 3], 6)).unwrap();
    // five layers drop W_Q and W_K; four layers drop W_Q, W_K, W_V and W_O
    c.check(
        self6 == 5 * 2 * d * d && self6 == 2_621_440,
        format!("self {{6}} saves {self6}"),
    );
    c.check(
        encdec33 == 4 * 4 * d * d && encdec33 == 4_194_304,
        format!("encdec {{3,3}} saves {encdec33}"),
    );
    c.note(format!(
        "self {{6}} saves {self6}, encdec {{3,3}} saves {encdec33}"
    ));
    c.finish();
}

/// Decoding cost per generated token: source work once plus every step.
fn per_token(cfg: &ModelConfig, policy: &SharingPolicy, src_len: usize, steps: usize) -> f64 {
    let mut total = estimate_source_flops(cfg, policy, src_len).unwrap();
    for t in 1..=steps {
        total += estimate_step_flops(cfg, policy, t, src_len).unwrap();
    }
    total as f64 / steps as f64
}

#[test]
fn criterion_06_flop_model() {
    let mut c = Criterion::start(
        6,
        "sharing the enc-dec context saves more than sharing self-attention",
        None,
    );
    let cfg = ModelConfig::base();
    let unshared = SharingPolicy::unshared(&cfg);
    let (t, src) = (64, 64);
    let step = |p: &SharingPolicy| estimate_step_flops(&cfg, p, t, src).unwrap();
    let self33 = SharingPolicy::decoder(vec![3, 3], vec![1; 6], 6);
    let encdec33 = SharingPolicy::decoder(vec![1; 6], vec![3, 3], 6);
    let save_self = step(&unshared) - step(&self33);
    let save_encdec = step(&unshared) - step(&encdec33);
    c.check(
        save_encdec > save_self,
        format!("step savings encdec {save_encdec} vs self {save_self}"),
    );

    let decoder_side = SharingPolicy::decoder(vec![3, 3], vec![3, 3], 6);
    let encoder_side = SharingPolicy {
        enc_blocks: vec![3, 3],
        ..unshared.clone()
    };
    let base = per_token(&cfg, &unshared, src, t);
    let dec_gain = base - per_token(&cfg, &decoder_side, src, t);
    let enc_gain = base - per_token(&cfg, &encoder_side, src, t);
    c.check(
        enc_gain > 0.0 && enc_gain < dec_gain,
        format!("per-token savings encoder {enc_gain} vs decoder {dec_gain}"),
    );
    c.note(format!(
        "t=64, src=64: step savings encdec {save_encdec} > self {save_self}; per-token savings encoder-side {:.0} < decoder-side {:.0}",
        enc_gain, dec_gain
    ));
    c.finish();
}

fn monotone_down(report: &BenchReport, id: &str, beams: &[usize]) -> (bool, Vec<f64>) {
    let tps: Vec<f64> = beams
        .iter()
        .map(|&b| report.record(id, b).unwrap().tokens_per_sec)
        .collect();
    (tps.windows(2).all(|w| w[1] < w[0]), tps)
}

#[test]
fn criterion_07_wall_clock() {
    let mut c = Criterion::start(
        7,
        "shared model decodes faster; throughput falls with beam size",
        Some(300.0),
    );
    let headline = commands::bench(&commands::BenchArgs {
        model: None,
        policies: &[],
        settings: BenchSettings::default(),
        out: None,
    })
    .unwrap();
    let shared_id = headline
        .records
        .iter()
        .find(|r| r.policy_id != BASELINE_ID)
        .unwrap()
        .policy_id
        .clone();
    let ratio = headline
        .speedups
        .iter()
        .find(|s| s.policy_id == shared_id)
        .unwrap()
        .ratio;
    c.check(ratio >= 1.10, format!("speed ratio {ratio:.3} < 1.10"));
    let flops = |id: &str| headline.record(id, 1).unwrap().flops_per_token;
    c.check(
        flops(&shared_id) < flops(BASELINE_ID),
        "shared flops/token not smaller",
    );

    let cfg = headline.config.model.clone();
    let beams = vec![4, 8, 12, 16, 20];
    let variants = vec![
        Variant {
            id: BASELINE_ID.into(),
            params: ModelParams::build(&cfg, &SharingPolicy::unshared(&cfg), 1).unwrap(),
        },
        Variant {
            id: shared_id.clone(),
            params: ModelParams::build(&cfg, &SharingPolicy::decoder(vec![6], vec![3, 3], 6), 1)
                .unwrap(),
        },
    ];
    let settings = BenchSettings {
        beams: beams.clone(),
        batch: 8,
        src_len: 16,
        tgt_len: 8,
        repeats: 5,
        ..BenchSettings::default()
    };
    let sweep = run_bench(&variants, &settings).unwrap();
    for id in [BASELINE_ID, shared_id.as_str()] {
        let (ok, tps) = monotone_down(&sweep, id, &beams);
        let shown: Vec<String> = tps.iter().map(|v| format!("{v:.1}")).collect();
        c.check(
            ok,
            format!(
                "{id} tokens/sec not decreasing over beams: {}",
                shown.join(", ")
            ),
        );
        c.note(format!("{id} beam sweep tokens/sec {}", shown.join(" > ")));
    }
    c.notes
        .insert(0, format!("default workload ratio {ratio:.3}"));
    c.finish();
}

#[test]
fn criterion_08_gradient_check() {
    let mut c = Criterion::start(
        8,
        "gradients match finite differences under a shared policy",
        Some(120.0),
    );
    let cfg = GradcheckConfig::default();
    c.check(
        cfg.model.enc_layers == 2
            && cfg.model.dec_layers == 2
            && cfg.model.d_model == 16
            && cfg.model.heads == 2
            && cfg.model.vocab == 11,
        "gradient check model is not 2+2 layers, d 16, 2 heads, vocab 11",
    );
    c.check(
        cfg.policy == SharingPolicy::decoder(vec![1, 1], vec![2], 2),
        "gradient check policy is not {1,1}/{2}",
    );
    let report = gradcheck(&cfg).unwrap();
    c.check(
        report.max_rel_error <= 1e-4,
        format!(
            "max relative error {:.3e} at {}",
            report.max_rel_error, report.worst_param
        ),
    );
    let absent = [
        "decoder.1.cross_attn.w_q",
        "decoder.1.cross_attn.w_k",
        "decoder.1.cross_attn.w_v",
        "decoder.1.cross_attn.w_o",
    ];
    for name in absent {
        c.check(
            !report.tensors.iter().any(|t| t == name),
            format!("{name} was checked"),
        );
    }
    let p = ModelParams::build(&cfg.model, &cfg.policy, 1).unwrap();
    let batch = san_core::data::random_pairs(&mut Rng::new(5), 2, cfg.model.vocab, 5);
    let (_, grads) = loss_and_grads(&p, &batch, &GradOptions::default()).unwrap();
    let names = grads.names();
    for name in absent {
        c.check(
            !names.iter().any(|n| n == name),
            format!("{name} has a gradient entry"),
        );
    }
    c.note(format!(
        "{} entries, max relative error {:.2e} at {}",
        report.checked, report.max_rel_error, report.worst_param
    ));
    c.finish();
}

#[test]
fn criterion_09_joint_loop() {
    let mut c = Criterion::start(
        9,
        "policy learning on the copy task reaches a fixed point",
        Some(600.0),
    );
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = ToyConfig::default();
    c.check(cfg.max_outer == 10, "toy max_outer is not 10");
    let summary = commands::train_toy(None, None, dir.path()).unwrap();
    c.check(summary.converged, "did not reach a repeated policy");
    c.check(
        summary.derived.len() <= 10,
        format!("{} iterations", summary.derived.len()),
    );
    let m = cfg.model.dec_layers;
    for (i, p) in summary.derived.iter().enumerate() {
        let (s, e): (usize, usize) = (p.self_blocks.iter().sum(), p.encdec_blocks.iter().sum());
        c.check(
            s == m && e == m,
            format!("iteration {} policy covers {s}/{e} of {m} layers", i + 1),
        );
    }
    let csv = std::fs::read_to_string(dir.path().join(commands::TOY_JS)).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    c.check(
        rows[0].len() == 2 + (m - 1),
        format!("curve header {:?}", rows[0]),
    );
    c.check(
        rows.iter().all(|r| r.len() == rows[0].len()),
        "ragged curve rows",
    );
    let per_pass = cfg.train.steps / cfg.train.checkpoint_every + 1;
    c.check(
        rows.len() - 1 == summary.checkpoints
            && summary.checkpoints == per_pass * summary.derived.len(),
        "curve rows do not match checkpoints",
    );
    let blocks = |b: &[usize]| {
        b.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    c.note(format!(
        "{} iterations, final self {{{}}} encdec {{{}}}, curve {} rows x {} pairs",
        summary.derived.len(),
        blocks(&summary.policy.self_blocks),
        blocks(&summary.policy.encdec_blocks),
        rows.len() - 1,
        m - 1
    ));
    c.finish();
}

#[test]
fn criterion_10_format_round_trips() {
    let mut c = Criterion::start(
        10,
        "weights, policies and divergence matrices round-trip",
        None,
    );
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = ModelConfig::small(2, 4, 16, 2, 21);
    let policy = SharingPolicy {
        self_blocks: vec![1, 3],
        encdec_blocks: vec![2, 2],
        enc_blocks: vec![2],
    };
    let p = random_model(&cfg, &policy, 10);
    let (a, b) = (dir.path().join("a.sanw"), dir.path().join("b.sanw"));
    save_weights(&p, &a).unwrap();
    let loaded = load_weights(&a).unwrap();
    save_weights(&loaded, &b).unwrap();
    c.check(
        std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap(),
        "save-load-save changed bytes",
    );
    c.check(
        encode_weights(&decode_weights(&encode_weights(&loaded).unwrap()).unwrap()).unwrap()
            == std::fs::read(&a).unwrap(),
        "in-memory round trip changed bytes",
    );

    let file = PolicyFile::from_policy(&policy, Some(0.35), Some(0.1 + 0.2));
    let back = PolicyFile::from_json(&file.to_json().unwrap()).unwrap();
    c.check(
        back == file && back.to_policy(&cfg).unwrap() == policy,
        "policy JSON round trip",
    );

    let rows: Vec<Vec<f64>> = FIG2_SELF.iter().map(|r| r.to_vec()).collect();
    let fig = JsMatrix::new(AttnKind::SelfAttn, Mat::from_rows(&rows).unwrap()).unwrap();
    c.check(
        JsMatrix::from_csv(&fig.to_csv(), AttnKind::SelfAttn).unwrap() == fig,
        "CSV round trip of 4-decimal matrix",
    );
    let mut rng = Rng::new(4);
    let corpus: Vec<Vec<AttnWeights>> = (0..3)
        .map(|_| {
            let src = tokens(&mut rng, 5, 21);
            forward_teacher(&loaded, &src, &[BOS, 4, 5, 6])
                .unwrap()
                .encdec_weights
        })
        .collect();
    let measured = js_matrix(&corpus, AttnKind::EncDec).unwrap();
    c.check(
        JsMatrix::from_json(&measured.to_json().unwrap()).unwrap() == measured,
        "JSON round trip is not exact",
    );
    let csv = measured.to_csv();
    c.check(
        JsMatrix::from_csv(&csv, AttnKind::EncDec).unwrap().to_csv() == csv,
        "CSV re-serialisation differs",
    );
    c.note("container bytes identical; policy JSON, matrix CSV and JSON lossless");
    c.finish();
}
