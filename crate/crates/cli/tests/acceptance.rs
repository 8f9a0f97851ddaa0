//! Acceptance suite. Prints one PASS/FAIL line per criterion; run with
//! `cargo test -p lms-fd-cli --test acceptance -- --nocapture` to see them.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lms_fd::budget::{budget_full_model, flops_ratio, model_params, shape_of};
use lms_fd::data::vocab::PAD;
use lms_fd::data::{encode_cipher, gen_cipher_corpus, make_batches, Batch, CipherConfig, CipherTask};
use lms_fd::model::{build_model, FfnStrategy, ModelConfig, Placement, Transformer};
use lms_fd::params::{grad_check_params, grad_check_params_against, ParamKind, Parameterized};
use lms_fd::training::{build_loss, compose_two_route_loss, LossWeights, Scheme};
use lms_fd::{Binder, DiffGraph, LanguageId, LmsLinear, Matrix, Route, SynthesisMode, Var};
use lms_fd_cli::{run_experiment, BudgetOutput, RunConfig};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and limits.
const GRAD_TOL: f64 = 1e-5;
const GRAD_EPS: f64 = 1e-6;
const FD_SHARE_SLACK: f64 = 2.0;
const FREQ_TOL: f64 = 0.02;
const SAMPLED_BATCHES: usize = 10_000;
const RUN_LIMIT: Duration = Duration::from_secs(300);
const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn lmsfd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lmsfd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn perturb<P: Parameterized<f64>>(m: &mut P, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.visit_params_mut("", &mut |_, p| {
        p.add_assign(&Matrix::gaussian(p.rows(), p.cols(), std, &mut rng))
            .unwrap();
    });
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: u32, languages: usize, n: usize) -> Batch {
    let src_lang = LanguageId(rng.random_range(0..languages));
    let tgt_lang = LanguageId(rng.random_range(0..languages));
    let (sw, tw) = (rng.random_range(2..7), rng.random_range(2..7));
    let mut b = Batch {
        src_lang,
        tgt_lang,
        src: vec![],
        tgt: vec![],
        src_lens: vec![],
        tgt_lens: vec![],
        pad: PAD,
    };
    for _ in 0..n {
        let sl = rng.random_range(1..=sw);
        let tl = rng.random_range(1..=tw);
        let mut s: Vec<u32> = (0..sl).map(|_| rng.random_range(8..vocab)).collect();
        let mut t: Vec<u32> = (0..tl).map(|_| rng.random_range(8..vocab)).collect();
        s.resize(sw, PAD);
        t.resize(tw, PAD);
        b.src.push(s);
        b.tgt.push(t);
        b.src_lens.push(sl);
        b.tgt_lens.push(tl);
    }
    b
}

fn small_model(strategy: FfnStrategy, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        embed_dim: 8,
        ffn_dim: 12,
        n_layers: 2,
        n_heads: 2,
        languages: 3,
        ffn_strategy: strategy,
        lms_rank: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn budget_exactness() -> Verdict {
    let t = Instant::now();
    let o = lmsfd(&[
        "budget", "-L", "15", "-r", "4096", "-c", "1024", "-E", "8", "-d", "32", "--json",
    ]);
    let elapsed = t.elapsed();
    if !o.status.success() {
        return verdict(false, String::from_utf8_lossy(&o.stderr));
    }
    let out: BudgetOutput = serde_json::from_slice(&o.stdout).unwrap();
    let r = &out.report;
    let got = [
        r.ls.train_extra_params,
        r.moe.train_extra_params,
        r.lms.train_extra_params,
        r.lms_fd.inference_extra_params,
    ];
    let want = [62_914_560, 33_554_432, 2_457_600, 163_840];
    verdict(
        got == want && elapsed < Duration::from_secs(1),
        format!(
            "LS/MoE/LMS/FD-inference = {got:?}, {:.0} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn flops_ratio_example() -> Verdict {
    let t = Instant::now();
    let f = flops_ratio(2048, 512, 20).unwrap();
    let elapsed = t.elapsed();
    // 2048·512 / (20·2560)
    let pass = f.exact() == Ratio::new(512, 25) && f.value == 20.48 && elapsed < Duration::from_secs(1);
    verdict(pass, format!("{} = {} ({})", f.exact(), f.value, f.rendered))
}

fn census_equals_closed_form() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut seen = HashSet::new();
    // Four configs per strategy; LMS strategies cycle through placements.
    let mut per_strategy = [0usize; FfnStrategy::ALL.len()];
    while checked < 20 {
        let si = checked % FfnStrategy::ALL.len();
        let strategy = FfnStrategy::ALL[si];
        let placement = if strategy.uses_lms() {
            Placement::ALL[per_strategy[si] % Placement::ALL.len()]
        } else {
            Placement::FfnOnly
        };
        let heads = rng.random_range(1..=3);
        let c = heads * rng.random_range(2..=5);
        let cfg = ModelConfig {
            vocab_size: rng.random_range(12..40),
            embed_dim: c,
            ffn_dim: rng.random_range(2..=20),
            n_layers: rng.random_range(1..=3),
            n_heads: heads,
            languages: rng.random_range(1..=5),
            ffn_strategy: strategy,
            lms_rank: rng.random_range(1..=3),
            lms_mode: if rng.random() {
                SynthesisMode::PairWise
            } else {
                SynthesisMode::LanguageWise
            },
            placement,
            n_experts: rng.random_range(1..=4),
            seed: rng.random(),
            ..ModelConfig::default()
        };
        if cfg.validate().is_err() {
            continue;
        }
        per_strategy[si] += 1;
        let m: Transformer<f64> = build_model(&cfg).unwrap();
        let census = m.census();
        let expect = model_params(&cfg).unwrap();
        let kinds_match = [
            ParamKind::Base,
            ParamKind::LanguageSpecific,
            ParamKind::SharedFactor,
            ParamKind::Expert,
            ParamKind::Gate,
        ]
        .iter()
        .all(|&k| census.kind(k) as u64 == expect.kind(k));
        let sides = [
            census.encoder_kind(ParamKind::LanguageSpecific) as u64,
            census.decoder_kind(ParamKind::LanguageSpecific) as u64,
        ];
        if census.total as u64 != expect.total || !kinds_match || sides != expect.language_specific_per_side {
            return verdict(false, format!("mismatch for {cfg:?}"));
        }
        if strategy.uses_lms() && placement == Placement::FfnOnly {
            // Independent count: two projections per FFN, L·d·(r+c) each.
            let (l, n, d, r, c) = (
                cfg.languages as u64,
                cfg.n_layers as u64,
                cfg.lms_rank as u64,
                cfg.ffn_dim as u64,
                cfg.embed_dim as u64,
            );
            let hand = 2 * l * n * d * (c + r);
            if sides != [hand, hand] || budget_full_model(&shape_of(&cfg)) != hand {
                return verdict(false, format!("per-side LS {sides:?} vs {hand} for {cfg:?}"));
            }
        }
        seen.insert(format!("{strategy:?}/{placement:?}"));
        checked += 1;
    }
    let elapsed = t.elapsed();
    // 3 single-placement strategies plus 2 LMS strategies in 3 placements.
    verdict(
        seen.len() == 9 && elapsed < Duration::from_secs(10),
        format!(
            "{checked} configs, {} strategy/placement combinations, {:.2} s",
            seen.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn zero_init_identity() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dense: Transformer<f64> = build_model(&small_model(FfnStrategy::Dense, 11)).unwrap();
    let lms: Vec<Transformer<f64>> = [FfnStrategy::Lms, FfnStrategy::LmsFd]
        .into_iter()
        .flat_map(|s| {
            Placement::ALL.into_iter().map(move |placement| {
                build_model(&ModelConfig {
                    placement,
                    ..small_model(s, 11)
                })
                .unwrap()
            })
        })
        .collect();
    for _ in 0..10 {
        let b = random_batch(&mut rng, 24, 3, 4);
        let want = dense.logits(&b, Route::Ls).unwrap();
        for m in &lms {
            if m.logits(&b, Route::Ls).unwrap() != want {
                return verdict(false, format!("{:?} differs", m.config().ffn_strategy));
            }
            if m.config().ffn_strategy == FfnStrategy::LmsFd && m.logits(&b, Route::Shared).unwrap() != want {
                return verdict(false, "shared route differs");
            }
        }
    }
    let elapsed = t.elapsed();
    verdict(
        elapsed < Duration::from_secs(10),
        format!(
            "10 batches x {} models bit-equal, {:.2} s",
            lms.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// LMS projection head over fixed features, producing both routes' logits.
struct Head {
    layer: LmsLinear<f64>,
    features: Matrix,
    targets: Vec<usize>,
}

impl Head {
    fn new(seed: u64) -> Self {
        let mut layer = LmsLinear::new(7, 6, 2, 3, SynthesisMode::PairWise, true, seed).unwrap();
        perturb(&mut layer, 0.3, seed + 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let features = Matrix::randn(5, 6, &mut rng);
        Self {
            layer,
            features,
            targets: vec![1, 6, 2, 0, 4],
        }
    }

    fn logits(&self, layer: &LmsLinear<f64>, g: &mut DiffGraph, b: &mut Binder<f64>, route: Route) -> Var {
        let x = g.constant(self.features.clone());
        layer
            .forward_rows(g, b, x, LanguageId(2), LanguageId(0), route)
            .unwrap()
    }

    fn loss(&self, layer: &LmsLinear<f64>, g: &mut DiffGraph, b: &mut Binder<f64>, scheme: Scheme) -> Var {
        let l = self.logits(layer, g, b, Route::Ls);
        let s = self.logits(layer, g, b, Route::Shared);
        compose_two_route_loss(g, l, s, &self.targets, PAD as usize, scheme, &LossWeights::default())
            .unwrap()
            .total
    }

    /// Detached-teacher loss with the teacher distribution frozen as a constant.
    fn frozen_teacher_loss(
        &self,
        layer: &LmsLinear<f64>,
        teacher: &Matrix,
        g: &mut DiffGraph,
        b: &mut Binder<f64>,
    ) -> Var {
        let l = self.logits(layer, g, b, Route::Ls);
        let s = self.logits(layer, g, b, Route::Shared);
        let ce_l = g.cross_entropy(l, &self.targets, 0).unwrap();
        let ce_s = g.cross_entropy(s, &self.targets, 0).unwrap();
        let t = g.constant(teacher.clone());
        let mask: Vec<bool> = self.targets.iter().map(|&t| t != 0).collect();
        let kl = g.kl_rows(t, s, false, Some(&mask)).unwrap();
        let ce = g.add(ce_l, ce_s).unwrap();
        let ce = g.scale(ce, 0.5);
        g.add(ce, kl).unwrap()
    }
}

fn gradient_fidelity() -> Verdict {
    let t = Instant::now();
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5 {
        let head = Head::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let weights = Matrix::randn(5, 7, &mut rng);

        let mut layer = head.layer.clone();
        let rep = grad_check_params(
            &mut layer,
            |i| i.kind != ParamKind::SharedFactor,
            GRAD_EPS,
            |m, g, bd| {
                let y = head.logits(m, g, bd, Route::Ls);
                let w = g.constant(weights.clone());
                let p = g.matmul_nt(y, w)?;
                let d = g.pick_per_row(p, &[0, 1, 2, 3, 4])?;
                Ok(g.sum(d))
            },
        )
        .unwrap();
        a = a.max(rep.max_rel_error);

        let rep = grad_check_params(
            &mut layer,
            |i| i.kind == ParamKind::SharedFactor,
            GRAD_EPS,
            |m, g, bd| Ok(head.loss(m, g, bd, Scheme::Fd)),
        )
        .unwrap();
        b = b.max(rep.max_rel_error);
        let teacher = {
            let mut g = DiffGraph::new();
            let mut bd = Binder::new();
            let v = head.logits(&layer, &mut g, &mut bd, Route::Ls);
            g.value(v).clone()
        };
        let rep = grad_check_params_against(
            &mut layer,
            |_| true,
            GRAD_EPS,
            |m, g, bd| Ok(head.loss(m, g, bd, Scheme::Fd)),
            |m, g, bd| Ok(head.frozen_teacher_loss(m, &teacher, g, bd)),
        )
        .unwrap();
        b = b.max(rep.max_rel_error);

        let rep = grad_check_params(
            &mut layer,
            |_| true,
            GRAD_EPS,
            |m, g, bd| Ok(head.loss(m, g, bd, Scheme::LmsFd)),
        )
        .unwrap();
        c = c.max(rep.max_rel_error);
    }
    let elapsed = t.elapsed();
    verdict(
        a < GRAD_TOL && b < GRAD_TOL && c < GRAD_TOL && elapsed < Duration::from_secs(30),
        format!(
            "max rel error LMS {a:.1e}, FD {b:.1e}, LMS+FD {c:.1e} over 5 seeds, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn fd_term_grads(m: &Transformer<f64>, b: &Batch, scheme: Scheme) -> Vec<(ParamKind, Option<Matrix>)> {
    let mut g = DiffGraph::new();
    let mut binder = Binder::new();
    let terms = build_loss(m, &mut g, &mut binder, b, scheme, &LossWeights::default()).unwrap();
    g.backward(terms.fd.unwrap());
    let grads = binder.collect_grads(&g, m);
    m.param_infos().into_iter().map(|i| i.kind).zip(grads).collect()
}

fn stop_gradient_contract() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut ls_checked = 0;
    for seed in 0..5 {
        let mut m: Transformer<f64> = build_model(&small_model(FfnStrategy::LmsFd, seed)).unwrap();
        perturb(&mut m, 0.1, seed + 50);
        let b = random_batch(&mut rng, 24, 3, 3);
        for (kind, grad) in fd_term_grads(&m, &b, Scheme::Fd) {
            if kind == ParamKind::LanguageSpecific {
                if grad.is_some_and(|g| g.data().iter().any(|&x| x != 0.0)) {
                    return verdict(false, "nonzero LS gradient under the detached teacher");
                }
                ls_checked += 1;
            }
        }
        let sym = fd_term_grads(&m, &b, Scheme::LmsFd);
        for side in [ParamKind::LanguageSpecific, ParamKind::SharedFactor] {
            let reached = sym
                .iter()
                .any(|(k, g)| *k == side && g.as_ref().is_some_and(|g| g.max_abs() > 0.0));
            if !reached {
                return verdict(false, format!("symmetric KL gives no gradient to {side:?}"));
            }
        }
    }
    let elapsed = t.elapsed();
    verdict(
        elapsed < Duration::from_secs(10),
        format!(
            "{ls_checked} LS factor gradients exactly zero; both routes reached; {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn synthetic_ordering() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let variants = ["dense", "lms-pair-wise", "lms-language-wise", "lms-fd"];
    let mut lines = Vec::new();
    let (mut a_ok, mut b_wins, mut c_ok, mut slowest) = (true, 0, true, Duration::ZERO);
    for seed in SEEDS {
        let mut mean = BTreeMap::new();
        for v in variants {
            let mut cfg = RunConfig::load(&configs_dir().join(format!("cipher-{v}.json"))).unwrap();
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            let t = Instant::now();
            let s = run_experiment(&cfg, &dir.path().join(format!("{v}-{seed}"))).unwrap();
            slowest = slowest.max(t.elapsed());
            for (route, r) in &s.accuracy {
                mean.insert(format!("{v}/{route}"), r.mean_accuracy);
            }
        }
        let dense = mean["dense/ls"];
        let pair = mean["lms-pair-wise/ls"];
        let lang = mean["lms-language-wise/ls"];
        let (fd_ls, fd_share) = (mean["lms-fd/ls"], mean["lms-fd/shared"]);
        a_ok &= pair > dense;
        b_wins += usize::from(pair >= lang);
        c_ok &= fd_share >= dense && fd_share >= fd_ls - FD_SHARE_SLACK;
        lines.push(format!(
            "seed {seed}: dense {dense:.2}, pair {pair:.2}, lang {lang:.2}, FD-LS {fd_ls:.2}, FD-Share {fd_share:.2}"
        ));
    }
    let pass = a_ok && b_wins >= 2 && c_ok && slowest < RUN_LIMIT;
    verdict(
        pass,
        format!(
            "(a) {a_ok} (b) {b_wins}/3 (c) {c_ok}; slowest run {:.0} s\n      {}",
            slowest.as_secs_f64(),
            lines.join("\n      ")
        ),
    )
}

fn homogeneity_and_sampling() -> Verdict {
    let t = Instant::now();
    let task = CipherTask::from_config(&CipherConfig::default()).unwrap();
    let corpus = encode_cipher(&task, &gen_cipher_corpus(&task, 1).unwrap()).unwrap();
    let mut sizes: BTreeMap<(LanguageId, LanguageId), usize> = BTreeMap::new();
    let mut rows: HashSet<(LanguageId, LanguageId, Vec<u32>)> = HashSet::new();
    for ex in &corpus.train {
        *sizes.entry(ex.pair()).or_default() += 1;
        rows.insert((ex.src_lang, ex.tgt_lang, ex.src.clone()));
    }
    let temperature = 5.0;
    let z: f64 = sizes.values().map(|&s| (s as f64).powf(1.0 / temperature)).sum();
    let mut counts: BTreeMap<(LanguageId, LanguageId), usize> = BTreeMap::new();
    for b in make_batches(&corpus.train, 16, PAD, temperature, 99)
        .unwrap()
        .take(SAMPLED_BATCHES)
    {
        for i in 0..b.len() {
            if !rows.contains(&(b.src_lang, b.tgt_lang, b.src[i][..b.src_lens[i]].to_vec())) {
                return verdict(false, format!("mixed batch for pair {:?}", b.pair()));
            }
        }
        *counts.entry(b.pair()).or_default() += 1;
    }
    let worst = sizes
        .iter()
        .map(|(k, &s)| {
            let expect = (s as f64).powf(1.0 / temperature) / z;
            let got = counts.get(k).copied().unwrap_or(0) as f64 / SAMPLED_BATCHES as f64;
            (got - expect).abs()
        })
        .fold(0.0, f64::max);
    let elapsed = t.elapsed();
    verdict(
        worst < FREQ_TOL && elapsed < Duration::from_secs(20),
        format!(
            "all batches single-pair; max frequency gap {worst:.4}; {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::load(&configs_dir().join("cipher-lms-fd.json")).unwrap();
    cfg.train.steps = 200;
    cfg.train.eval_interval = 100;
    cfg.output_dir = None;
    let path = dir.path().join("run.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut bytes = Vec::new();
    for out in ["first", "second"] {
        let out = dir.path().join(out);
        let o = lmsfd(&[
            "run",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        if !o.status.success() {
            return verdict(false, String::from_utf8_lossy(&o.stderr));
        }
        bytes.push(std::fs::read(out.join("summary.json")).unwrap());
    }
    verdict(
        bytes[0] == bytes[1],
        format!(
            "summary.json {} bytes, identical: {}",
            bytes[0].len(),
            bytes[0] == bytes[1]
        ),
    )
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 9] = [
        ("budget exactness", budget_exactness),
        ("FLOPs ratio", flops_ratio_example),
        ("census equals closed form", census_equals_closed_form),
        ("zero-init identity", zero_init_identity),
        ("gradient fidelity", gradient_fidelity),
        ("stop-gradient contract", stop_gradient_contract),
        ("synthetic-task ordering", synthetic_ordering),
        ("homogeneity and sampling", homogeneity_and_sampling),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = std::panic::catch_unwind(check).unwrap_or_else(|_| verdict(false, "panicked"));
        println!(
            "[{}] {} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
