//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs without the test harness so the lines reach the log as-is.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use genre_core::config::RunConfig;
use genre_core::gating::{class_gate, hard_gate, Pathway};
use genre_core::gradsuite::{run_suite, SuiteConfig};
use genre_core::kg::{sample_negatives, train_transd, Relation, TransD, TransDHyper, Triplet};
use genre_core::losses::{asl_loss, bce_loss, ce_loss, LossParams};
use genre_core::metrics::{ba_suite, confusion, cooccurrence, f1_suite, hamming_loss, misclassification_matrix, Conventions, Counts};
use genre_core::model::{GenreModel, NetId, Objective, Variant};
use genre_core::parallel::Parallelism;
use genre_core::pipeline::{self, Corpus, Phase, TrainOutcome};
use genre_core::seed;
use genre_core::taxonomy::Branch;
use genre_core::trainer::Dataset;
use ndarray::Array2;
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 50;
const GRAD_SECONDS: f64 = 60.0;
const LOSS_CASES: usize = 1000;
const LOSS_TOL: f64 = 1e-10;
const ASL_BCE_TOL: f64 = 1e-12;
const TRANSD_TOL: f64 = 1e-10;
const TRANSD_EPOCHS: usize = 200;
const TRANSD_RANKED: f64 = 0.9;
const TRANSD_SECONDS: f64 = 30.0;
const METRIC_FIXTURES: usize = 100;
const METRIC_TOL: f64 = 1e-10;
const E2E_LEVEL1: f64 = 95.0;
const E2E_MACRO_F1: f64 = 85.0;
const E2E_SECONDS: f64 = 300.0;
const ABLATION_SLACK: f64 = 1.0;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Check { pass, detail: detail.into() }
    }
}

/// Collects failure messages; a check passes when none were recorded.
#[derive(Default)]
struct Failures(Vec<String>);

impl Failures {
    fn expect(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.0.push(msg());
        }
    }

    fn into_check(self, summary: String) -> Check {
        match self.0.len() {
            0 => Check::new(true, summary),
            n => Check::new(false, format!("{summary}; {n} failures, first: {}", self.0[0])),
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Check {
    let t = Instant::now();
    let rows = run_suite(&SuiteConfig { instances: GRAD_INSTANCES, seed: 0, tolerance: GRAD_TOL }, Parallelism::Sequential).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = rows.iter().filter(|r| !r.passes(GRAD_TOL) || r.instances < GRAD_INSTANCES).map(|r| r.target.as_str()).collect();
    let checked: usize = rows.iter().map(|r| r.checked).sum();
    Check::new(
        failing.is_empty() && secs < GRAD_SECONDS,
        format!(
            "{} objective/target rows x {GRAD_INSTANCES} instances, {checked} parameters, worst rel err {worst:.2e} (< {GRAD_TOL:e}), {secs:.1}s (< {GRAD_SECONDS}s){}",
            rows.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- losses

/// Per-label asymmetric loss term and its derivative, written out case by case.
fn asl_term(q: f64, y: bool, p: &LossParams) -> (f64, f64) {
    let e0 = p.epsilon0;
    if y {
        let g = p.gamma_pos;
        let w = (1.0 - q).powf(g);
        let dw = if g == 0.0 { 0.0 } else { -g * (1.0 - q).powf(g - 1.0) };
        let l = (q + e0).ln();
        (-(w * l), -(dw * l + w / (q + e0)))
    } else if q <= p.epsilon {
        (0.0, 0.0)
    } else {
        let g = p.gamma_neg;
        let s = q - p.epsilon;
        let w = s.powf(g);
        let dw = if g == 0.0 { 0.0 } else { g * s.powf(g - 1.0) };
        let l = (1.0 - s + e0).ln();
        (-(w * l), -(dw * l - w / (1.0 - s + e0)))
    }
}

fn loss_oracles() -> Check {
    let mut rng = seed::rng(2024);
    let mut f = Failures::default();
    for case in 0..LOSS_CASES {
        let m = rng.random_range(1..12);
        let p = LossParams {
            gamma_pos: rng.random_range(0.0..3.0),
            gamma_neg: rng.random_range(0.0..6.0),
            epsilon: rng.random_range(0.0..0.2),
            epsilon0: [1e-8, 1e-6, 1e-12][case % 3],
            ..Default::default()
        };
        let yhat: Vec<f64> = (0..m).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<bool> = (0..m).map(|_| rng.random_bool(0.4)).collect();
        let yf: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

        let got = asl_loss(&yhat, &yf, &p).unwrap();
        let terms: Vec<(f64, f64)> = yhat.iter().zip(&y).map(|(&q, &t)| asl_term(q, t, &p)).collect();
        let want = terms.iter().map(|t| t.0).sum::<f64>() / m as f64;
        f.expect(close(got.value, want, LOSS_TOL), || format!("asl case {case}: {} vs {want}", got.value));
        for (j, t) in terms.iter().enumerate() {
            f.expect(close(got.gradient[j], t.1 / m as f64, LOSS_TOL), || format!("asl grad case {case}.{j}"));
        }

        let (q, t) = (yhat[0], yf[0]);
        let e0 = p.epsilon0;
        let b = bce_loss(q, t, e0).unwrap();
        let (bv, bg) = if t == 1.0 { (-(q + e0).ln(), -1.0 / (q + e0)) } else { (-(1.0 - q + e0).ln(), 1.0 / (1.0 - q + e0)) };
        f.expect(close(b.value, bv, LOSS_TOL) && close(b.gradient[0], bg, LOSS_TOL), || format!("bce case {case}"));

        let k = rng.random_range(2..6);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let dist: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let hot = rng.random_range(0..k);
        let target: Vec<f64> = (0..k).map(|j| if j == hot { 1.0 } else { 0.0 }).collect();
        let c = ce_loss(&dist, &target, e0).unwrap();
        f.expect(close(c.value, -(dist[hot] + e0).ln(), LOSS_TOL), || format!("ce case {case}"));
        f.expect(
            (0..k).all(|j| close(c.gradient[j], if j == hot { -1.0 / (dist[hot] + e0) } else { 0.0 }, LOSS_TOL)),
            || format!("ce grad case {case}"),
        );

        let plain = LossParams { gamma_pos: 0.0, gamma_neg: 0.0, epsilon: 0.0, ..p };
        let asl = asl_loss(&yhat, &yf, &plain).unwrap().value;
        let bce = yhat.iter().zip(&yf).map(|(&q, &t)| bce_loss(q, t, e0).unwrap().value).sum::<f64>() / m as f64;
        f.expect((asl - bce).abs() <= ASL_BCE_TOL, || format!("asl->bce case {case}: {asl} vs {bce}"));
    }

    // worked values
    let d = LossParams::default();
    let tiny = LossParams { epsilon0: 1e-15, ..d };
    let worked = [
        ("asl y=1 q=0.5", asl_loss(&[0.5], &[1.0], &tiny).unwrap().value, std::f64::consts::LN_2, 1e-4),
        ("asl y=0 q=0.55", asl_loss(&[0.55], &[0.0], &d).unwrap().value, 0.04332, 1e-5),
        ("asl y=0 q=0.03", asl_loss(&[0.03], &[0.0], &d).unwrap().value, 0.0, 0.0),
        ("bce q=0.9 y=0", bce_loss(0.9, 0.0, 1e-8).unwrap().value, 2.3026, 1e-4),
        ("ce e2", ce_loss(&[0.7, 0.2, 0.1], &[0.0, 1.0, 0.0], 1e-8).unwrap().value, 1.6094, 1e-4),
    ];
    for (name, got, want, tol) in worked {
        f.expect((got - want).abs() <= tol, || format!("{name}: {got} vs {want}"));
    }
    f.into_check(format!("{LOSS_CASES} random cases each for ASL, BCE, CE at {LOSS_TOL:e}; ASL->BCE at {ASL_BCE_TOL:e}; 5 worked values"))
}

// ---------------------------------------------------------------- TransD

fn transd() -> Check {
    let t = Instant::now();
    let mut f = Failures::default();
    let mut rng = seed::rng(31);
    let table = |rng: &mut seed::Rng, r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (n, de, dr) = (rng.random_range(2..7), rng.random_range(1..10), rng.random_range(1..10));
        let mut emb = TransD { entity: table(&mut rng, n, de), entity_proj: table(&mut rng, n, de), relation: table(&mut rng, 6, dr), relation_proj: table(&mut rng, 6, dr) };
        let head = rng.random_range(0..n);
        let tr = Triplet { head, tail: (head + rng.random_range(1..n)) % n, relation: Relation::ALL[rng.random_range(0..6)] };
        let s = emb.score(&tr).unwrap();
        let err = (s - common::dense_score(&emb, &tr)).abs();
        worst = worst.max(err);
        f.expect(err <= TRANSD_TOL, || format!("dense oracle off by {err:e}"));
        if de == dr {
            emb.entity_proj.fill(0.0);
            emb.relation_proj.fill(0.0);
            let v = &emb.entity.row(tr.head) + &emb.relation.row(tr.relation.index()) - &emb.entity.row(tr.tail);
            let s = emb.score(&tr).unwrap();
            f.expect((s + v.dot(&v)).abs() <= TRANSD_TOL, || format!("degeneration: {s} vs {}", -v.dot(&v)));
        }
    }

    let g = common::toy_graph();
    let hyper = TransDHyper { entity_dim: 16, relation_dim: 8, margin: 1.0, lr: 0.01, epochs: TRANSD_EPOCHS, batch: 8, seed: 7 };
    let out = train_transd(&g, &hyper).unwrap();
    let (first, last) = (out.curve[0], *out.curve.last().unwrap());
    f.expect(last < first, || format!("margin loss did not decrease: {first} -> {last}"));
    let negs = sample_negatives(&g, g.triplets(), &mut seed::rng(99));
    let pairs: Vec<_> = g.triplets().iter().zip(&negs).filter_map(|(p, q)| q.map(|q| (p, q))).collect();
    let ranked = pairs.iter().filter(|(p, q)| out.embeddings.score(p).unwrap() > out.embeddings.score(q).unwrap()).count();
    let frac = ranked as f64 / pairs.len() as f64;
    f.expect(frac >= TRANSD_RANKED, || format!("only {ranked}/{} positives outrank their corruption", pairs.len()));
    let secs = t.elapsed().as_secs_f64();
    f.expect(secs < TRANSD_SECONDS, || format!("took {secs:.1}s"));
    f.into_check(format!(
        "dense oracle worst {worst:.1e}; toy graph ({} entities, {} triplets) loss {first:.4} -> {last:.4} over {TRANSD_EPOCHS} epochs, {ranked}/{} ranked ({:.0}%), {secs:.1}s",
        g.entities().len(),
        g.triplets().len(),
        pairs.len(),
        100.0 * frac
    ))
}

// ---------------------------------------------------------------- metrics

type Matrix = Vec<Vec<bool>>;

fn count(truth: &Matrix, pred: &Matrix, j: usize) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fnn, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for s in 0..truth.len() {
        match (truth[s][j], pred[s][j]) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fnn += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    (tp, fp, fnn, tn)
}

fn div0(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f1_of(tp: f64, fp: f64, fnn: f64) -> f64 {
    div0(200.0 * tp, 2.0 * tp + fp + fnn)
}

fn ba_of(tp: f64, fp: f64, fnn: f64, tn: f64) -> f64 {
    50.0 * (div0(tp, tp + fnn) + div0(tn, tn + fp))
}

/// Every aggregate recomputed from its definition: (F1 x4, BA x4, HL).
fn brute_force(truth: &Matrix, pred: &Matrix) -> ([f64; 4], [f64; 4], f64) {
    let (n, m) = (truth.len(), truth[0].len());
    let per: Vec<(f64, f64, f64, f64)> = (0..m).map(|j| count(truth, pred, j)).collect();
    let sum = |k: fn(&(f64, f64, f64, f64)) -> f64| per.iter().map(k).sum::<f64>();
    let (tp, fp, fnn, tn) = (sum(|c| c.0), sum(|c| c.1), sum(|c| c.2), sum(|c| c.3));
    let support: Vec<f64> = per.iter().map(|c| c.0 + c.2).collect();
    let total_support: f64 = support.iter().sum();
    let f1s: Vec<f64> = per.iter().map(|c| f1_of(c.0, c.1, c.2)).collect();
    let bas: Vec<f64> = per.iter().map(|c| ba_of(c.0, c.1, c.2, c.3)).collect();
    let weighted = |v: &[f64]| div0(v.iter().zip(&support).map(|(a, s)| a * s).sum(), total_support);
    let mut sample_f1 = 0.0;
    let mut sample_ba = 0.0;
    let mut mismatched = 0.0;
    for s in 0..n {
        let (mut inter, mut size, mut rtp, mut rfp, mut rfn, mut rtn) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..m {
            let (t, p) = (truth[s][j], pred[s][j]);
            size += t as u8 as f64 + p as u8 as f64;
            inter += (t && p) as u8 as f64;
            mismatched += (t != p) as u8 as f64;
            match (t, p) {
                (true, true) => rtp += 1.0,
                (false, true) => rfp += 1.0,
                (true, false) => rfn += 1.0,
                (false, false) => rtn += 1.0,
            }
        }
        sample_f1 += if size == 0.0 { 100.0 } else { 200.0 * inter / size };
        sample_ba += ba_of(rtp, rfp, rfn, rtn);
    }
    (
        [f1_of(tp, fp, fnn), f1s.iter().sum::<f64>() / m as f64, weighted(&f1s), sample_f1 / n as f64],
        [ba_of(tp, fp, fnn, tn), bas.iter().sum::<f64>() / m as f64, weighted(&bas), sample_ba / n as f64],
        mismatched / (n * m) as f64,
    )
}

fn brute_cooccurrence(truth: &Matrix) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let m = truth[0].len();
    let both = |i: usize, j: usize| truth.iter().filter(|r| r[i] && r[j]).count() as f64;
    let counts: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| both(i, j)).collect()).collect();
    let ratios = (0..m).map(|i| (0..m).map(|j| div0(counts[i][j], truth.iter().filter(|r| r[j]).count() as f64)).collect()).collect();
    (counts, ratios)
}

fn brute_misclassification(truth: &Matrix, pred: &Matrix) -> Vec<Vec<f64>> {
    let m = truth[0].len();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let missed: Vec<usize> = (0..truth.len()).filter(|&s| truth[s][j] && !pred[s][j]).collect();
                    let wrong_i = missed.iter().filter(|&&s| pred[s][i] && !truth[s][i]).count();
                    div0(wrong_i as f64, missed.len() as f64)
                })
                .collect()
        })
        .collect()
}

fn bits(rows: &[&[u8]]) -> Matrix {
    rows.iter().map(|r| r.iter().map(|&x| x == 1).collect()).collect()
}

fn metrics_oracles() -> Check {
    let mut f = Failures::default();
    let conv = Conventions::default();
    let mut rng = seed::rng(77);
    let near = |a: f64, b: f64| (a - b).abs() <= METRIC_TOL;
    for k in 0..METRIC_FIXTURES {
        let (n, m) = (rng.random_range(1..40), rng.random_range(1..10));
        let density = rng.random_range(0.05..0.7);
        let mut draw = || -> Matrix { (0..n).map(|_| (0..m).map(|_| rng.random_bool(density)).collect()).collect() };
        let truth = draw();
        let pred = draw();
        let conf = confusion(&truth, &pred).unwrap();
        let f1 = f1_suite(&conf, &truth, &pred, &conv).unwrap();
        let ba = ba_suite(&conf, &truth, &pred).unwrap();
        let hl = hamming_loss(&truth, &pred).unwrap();
        let (bf1, bba, bhl) = brute_force(&truth, &pred);
        let got_f1 = [f1.micro, f1.macro_, f1.weighted, f1.samples];
        let got_ba = [ba.micro, ba.macro_, ba.weighted, ba.samples];
        for v in 0..4 {
            f.expect(near(got_f1[v], bf1[v]), || format!("fixture {k} F1[{v}]: {} vs {}", got_f1[v], bf1[v]));
            f.expect(near(got_ba[v], bba[v]), || format!("fixture {k} BA[{v}]: {} vs {}", got_ba[v], bba[v]));
        }
        f.expect(near(hl, bhl), || format!("fixture {k} HL"));
        let (counts, ratios) = cooccurrence(&truth).unwrap();
        let (bc, br) = brute_cooccurrence(&truth);
        let mc = misclassification_matrix(&truth, &pred).unwrap();
        let bm = brute_misclassification(&truth, &pred);
        for i in 0..m {
            for j in 0..m {
                f.expect(counts[i][j] as f64 == bc[i][j] && near(ratios[i][j], br[i][j]), || format!("fixture {k} co-occurrence ({i},{j})"));
                f.expect(near(mc[i][j], bm[i][j]), || format!("fixture {k} misclassification ({i},{j})"));
            }
        }
    }

    // hand-derived fixtures
    let c = confusion(&bits(&[&[1, 0], &[0, 1]]), &bits(&[&[1, 1], &[0, 0]])).unwrap();
    f.expect(c.labels[0] == Counts { tp: 1, fp: 0, fn_: 0, tn: 1 }, || "confusion label 0".into());
    f.expect(c.labels[1] == Counts { tp: 0, fp: 1, fn_: 1, tn: 0 }, || "confusion label 1".into());
    // pooled TP=2, FP=1, FN=1
    let (t, p) = (bits(&[&[1, 1], &[0, 1]]), bits(&[&[1, 0], &[1, 1]]));
    let micro = f1_suite(&confusion(&t, &p).unwrap(), &t, &p, &conv).unwrap().micro;
    f.expect((micro - 66.67).abs() < 0.005, || format!("F_micro {micro}"));
    // one label: TP=1, FN=1, TN=3, FP=1
    let (t, p) = (bits(&[&[1], &[1], &[0], &[0], &[0], &[0]]), bits(&[&[1], &[0], &[1], &[0], &[0], &[0]]));
    let ba = ba_suite(&confusion(&t, &p).unwrap(), &t, &p).unwrap().macro_;
    f.expect(ba == 62.5, || format!("BA {ba}"));
    let hl = hamming_loss(&bits(&[&[1, 0, 1], &[0, 1, 0]]), &bits(&[&[1, 1, 1], &[0, 0, 0]])).unwrap();
    f.expect(hl == 2.0 / 6.0, || format!("HL {hl}"));
    let (counts, ratios) = cooccurrence(&bits(&[&[0, 1, 1]])).unwrap();
    f.expect(counts[1][2] == 1 && counts[2][1] == 1 && counts[1][1] == 1 && counts[2][2] == 1 && counts[0][0] == 0, || "co-occurrence single sample".into());
    f.expect(ratios[1][1] == 1.0 && ratios[2][2] == 1.0, || "co-occurrence diagonal".into());
    let mc = misclassification_matrix(&bits(&[&[0, 1]]), &bits(&[&[1, 0]])).unwrap();
    f.expect(mc[0][1] == 1.0 && mc[1][0] == 0.0, || "misclassification one sample".into());
    let t = bits(&[&[1, 0, 1], &[0, 1, 0]]);
    f.expect(misclassification_matrix(&t, &t).unwrap().iter().flatten().all(|&v| v == 0.0), || "misclassification perfect".into());
    let s = f1_suite(&confusion(&t, &t).unwrap(), &t, &t, &conv).unwrap();
    f.expect([s.micro, s.macro_, s.weighted, s.samples] == [100.0; 4], || "perfect F1".into());

    f.into_check(format!("{METRIC_FIXTURES} random fixtures vs brute force at {METRIC_TOL:e}; 9 hand-derived fixtures"))
}

// ---------------------------------------------------------------- end to end

struct Run {
    dir: tempfile::TempDir,
    cfg: RunConfig,
    corpus: Corpus,
    outcome: TrainOutcome,
    secs: f64,
}

fn synthetic_config(dir: &Path, par: Parallelism) -> RunConfig {
    let mut cfg = RunConfig::synthetic();
    cfg.paths.rebase(dir);
    cfg.train.parallelism = par;
    cfg
}

/// gen-synth, graph embedding and two-phase training, as the CLI runs them.
fn full_run(par: Parallelism) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path(), par);
    let t = Instant::now();
    pipeline::gen_synth(&cfg).unwrap();
    let mut corpus = Corpus::load(&cfg).unwrap();
    pipeline::kg_train(&cfg, &mut corpus).unwrap();
    let outcome = pipeline::run_training(&cfg, &corpus, Phase::Both).unwrap();
    Run { secs: t.elapsed().as_secs_f64(), dir, cfg, corpus, outcome }
}

fn end_to_end(run: &Run) -> Check {
    let s = &run.cfg.synth;
    let test = run.outcome.report.test.as_ref().expect("test split is non-empty");
    let l1 = test.level1.accuracy;
    let (fic, non) = (test.fiction.f1.macro_, test.nonfiction.f1.macro_);
    Check::new(
        l1 >= E2E_LEVEL1 && fic >= E2E_MACRO_F1 && non >= E2E_MACRO_F1 && run.secs < E2E_SECONDS,
        format!(
            "n={} m1={} m2={} d={} sigma={} corruption={} seed={}: level-1 acc {l1:.2} (>= {E2E_LEVEL1}), macro-F1 fiction {fic:.2} / nonfiction {non:.2} (>= {E2E_MACRO_F1}), {:.1}s single-threaded (< {E2E_SECONDS}s)",
            s.n_samples, s.m1, s.m2, s.dims.visual, s.noise_sigma, s.corruption.visual, run.cfg.seed, run.secs
        ),
    )
}

// ---------------------------------------------------------------- gating

/// Observe, one sample at a time, which Level-2 heads receive gradient.
fn audit_gating(model: &GenreModel, data: &Dataset, f: &mut Failures) -> (usize, usize, usize) {
    let (mut wrong_gates, mut saturated) = (0, 0);
    for i in 0..data.len() {
        let x = data.inputs.select(&[i]);
        let truth = &data.truth[i..i + 1];
        let decision = model.route(&x).unwrap()[0];
        let d = decision.distribution;
        let max = d.iter().copied().fold(f64::MIN, f64::max);
        let hot = decision.hard.one_hot();
        f.expect(hot.iter().sum::<f64>() == 1.0 && hot.iter().all(|&v| v == 0.0 || v == 1.0), || format!("sample {i}: gate {hot:?} not one-hot"));
        f.expect(d[decision.hard.index()] == max, || format!("sample {i}: gate {:?} not at argmax of {d:?}", decision.hard));

        let (yhat, _) = model.level1_forward(&x).unwrap();
        let gate = class_gate(yhat.row(0).as_slice().unwrap()).unwrap();
        let step = model.compute_gradients(&x, truth, Objective::Joint, Some(&[decision.hard]), None, &LossParams::default()).unwrap();
        let heads: Vec<NetId> = step.grads.nonzero().into_iter().filter(|n| n.is_level2_head()).collect();
        if gate == truth[0].branch {
            let want = NetId::Head(decision.hard, truth[0].branch);
            if heads.is_empty() {
                // a head whose sigmoid outputs saturate (q == 1 on positives,
                // q <= epsilon on negatives) has an exactly zero logit gradient
                let (_, latent) = model.level1_forward(&x).unwrap();
                let q = model.level2_forward(decision.hard, truth[0].branch, &x, &latent).unwrap();
                let p = LossParams::default();
                let dead = q.iter().zip(&truth[0].level2).all(|(&q, &y)| asl_term(q, y, &p).1 * q * (1.0 - q) == 0.0);
                f.expect(dead, || format!("sample {i}: {} received no gradient", want.name()));
                saturated += 1;
            } else {
                f.expect(heads == [want], || format!("sample {i}: heads {heads:?} received gradient, expected only {}", want.name()));
            }
        } else {
            wrong_gates += 1;
            f.expect(heads.is_empty(), || format!("sample {i}: Level-1 wrong but heads {heads:?} received gradient"));
        }
    }
    (data.len(), wrong_gates, saturated)
}

fn gating(run: &Run) -> Check {
    let mut f = Failures::default();
    let mut rng = seed::rng(5);
    for k in 0..10_000 {
        let mut d: Vec<f64> = (0..3).map(|_| rng.random_range(0..4) as f64).collect();
        if d.iter().all(|&v| v == 0.0) {
            d[0] = 1.0;
        }
        let s: f64 = d.iter().sum();
        d.iter_mut().for_each(|v| *v /= s);
        let g = hard_gate(&d).unwrap();
        let max = d.iter().copied().fold(f64::MIN, f64::max);
        let first = d.iter().position(|&v| v == max).unwrap();
        f.expect(g == Pathway::ALL[first], || format!("case {k}: {d:?} -> {g:?}"));
    }

    let [train, ..] = run.corpus.parts().unwrap();
    let init = GenreModel::new(run.cfg.model.clone(), run.corpus.taxonomy.clone(), Variant::Full, run.cfg.seed).unwrap();
    let data = Dataset::new(&train, &run.corpus.stores, &init).unwrap();
    let (n0, wrong0, sat0) = audit_gating(&init, &data, &mut f);
    let (n1, wrong1, sat1) = audit_gating(&run.outcome.model, &data, &mut f);

    let report = &run.outcome.report.train;
    let a = &report.gate_audit;
    f.expect(a.violations() == 0, || format!("training audit recorded {} violations", a.violations()));
    f.expect(report.non_argmax_routes == 0, || format!("{} non-argmax routes during training", report.non_argmax_routes));
    f.into_check(format!(
        "10000 random distributions (with ties); per-sample epoch over {n0} training books at init ({wrong0} wrong Level-1 gates, {sat0} saturated heads) and after training ({n1}, {wrong1} wrong, {sat1} saturated); training audit {} samples, {} violations",
        a.samples,
        a.violations()
    ))
}

// ---------------------------------------------------------------- ablation

fn ablation(run: &Run) -> Check {
    let variants = [Variant::VisualOnly, Variant::TextOnly, Variant::MultimodalOnly];
    let rows = pipeline::run_ablation(&run.cfg, &run.corpus, &variants).unwrap();
    let full = run.outcome.report.test.as_ref().unwrap();
    let score = |v: Variant, b: Branch| {
        if v == Variant::Full {
            full.branch(b).f1.macro_
        } else {
            rows.iter().find(|r| r.variant == v).unwrap().test.branch(b).f1.macro_
        }
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for b in Branch::ALL {
        let (f, psi, uv, ud) = (score(Variant::Full, b), score(Variant::MultimodalOnly, b), score(Variant::VisualOnly, b), score(Variant::TextOnly, b));
        pass &= f + ABLATION_SLACK >= psi && psi + ABLATION_SLACK >= uv.max(ud);
        parts.push(format!("{}: full {f:.2} >= psiM {psi:.2} >= max(UMv {uv:.2}, UMd {ud:.2})", b.name()));
    }
    Check::new(pass, format!("{} (tolerance {ABLATION_SLACK} pp)", parts.join("; ")))
}

// ---------------------------------------------------------------- determinism

fn determinism(a: &Run, b: &Run) -> Check {
    let files = [
        pipeline::CHECKPOINT,
        pipeline::PHASE1_CHECKPOINT,
        pipeline::REPORT,
        pipeline::METRICS_CSV,
        pipeline::CURVES_CSV,
        pipeline::GRAPH,
    ];
    let mut differ = Vec::new();
    for f in files {
        let read = |r: &Run| std::fs::read(pipeline::output(&r.cfg, f)).unwrap();
        if read(a) != read(b) {
            differ.push(f);
        }
    }
    for store in ["metadata.f32", "visual.f32", "manifest.jsonl"] {
        let read = |r: &Run| std::fs::read(r.dir.path().join("data").join(store)).unwrap();
        if read(a) != read(b) {
            differ.push(store);
        }
    }
    Check::new(
        differ.is_empty(),
        if differ.is_empty() {
            format!("{} artifacts byte-identical across two runs (sequential and rayon evaluation)", files.len() + 3)
        } else {
            format!("differ: {}", differ.join(", "))
        },
    )
}

fn record(results: &mut Vec<(&'static str, bool)>, name: &'static str, check: impl FnOnce() -> Check) {
    let c = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        Check::new(false, format!("panicked: {msg}"))
    });
    println!("{} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
    results.push((name, c.pass));
}

fn main() {
    // `cargo test -- --list` and filters come through as arguments
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results = Vec::new();
    record(&mut results, "gradient suite", gradient_suite);
    record(&mut results, "loss oracles", loss_oracles);
    record(&mut results, "TransD", transd);
    record(&mut results, "metrics oracles", metrics_oracles);

    let runs = catch_unwind(|| (full_run(Parallelism::Sequential), full_run(Parallelism::Rayon)));
    match &runs {
        Ok((first, second)) => {
            record(&mut results, "gating invariants", || gating(first));
            record(&mut results, "end-to-end synthetic", || end_to_end(first));
            record(&mut results, "ablation ordering", || ablation(first));
            record(&mut results, "determinism", || determinism(first, second));
        }
        Err(_) => {
            for name in ["gating invariants", "end-to-end synthetic", "ablation ordering", "determinism"] {
                println!("FAIL {name}: the synthetic training run did not complete");
                results.push((name, false));
            }
        }
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
