//! Acceptance criteria, run as one binary that prints a PASS or FAIL line per
//! criterion and exits non-zero if any fails.

use std::fs;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use naus::decode::{exhaustive_best, fixture, length_control_decode, truncate_decode, CollapseMode, DecodeError};
use naus::lattice::LogProbLattice;
use naus::model::{forward, load_checkpoint, loss_and_grad, ModelConfig, ModelParams};
use naus::oracle::{check_ctc, check_decoder, OracleSizes};
use naus::pipeline::{cmd_pipeline, train_lm_stage, PipelineConfig};
use naus::rougeval::{evaluate_lines, rouge_l, rouge_n, truncated_recall, BudgetUnit, Protocol};
use naus::search::{hill_climb_with, sentence_rng, Scorer, SearchConfig};
use naus::textkit::{tokenize, Vocab};
use naus::toydata::{templated_corpus, vectors_text, word_vectors};

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn worked_example() -> Verdict {
    let start = Instant::now();
    let lat = fixture::two_slot_lattice();
    let run = || -> Result<Vec<String>, DecodeError> {
        let mut problems = Vec::new();
        let merge1 = length_control_decode(&lat, 2, 1, CollapseMode::Merge)?;
        if fixture::render(&merge1.words) != "like I" {
            problems.push(format!("merge B=1 gave {:?}", fixture::render(&merge1.words)));
        }
        let nm = length_control_decode(&lat, 2, 1, CollapseMode::NoMerge)?;
        if fixture::render(&nm.words) != "like like" || !close(nm.logp.exp(), 0.36, 1e-12) {
            problems.push(format!("no_merge B=1 gave {:?} p={}", fixture::render(&nm.words), nm.logp.exp()));
        }
        let exact = exhaustive_best(&lat, 2, CollapseMode::Merge)?;
        if fixture::render(&exact.words) != "I like" || !close(exact.logp.exp(), 0.351, 1e-12) {
            problems.push(format!("exhaustive merge gave {:?} p={}", fixture::render(&exact.words), exact.logp.exp()));
        }
        let merge2 = length_control_decode(&lat, 2, 2, CollapseMode::Merge)?;
        if fixture::render(&merge2.words) != "I like" || !close(merge2.logp.exp(), 0.351, 1e-12) {
            problems.push(format!("merge B=2 gave {:?} p={}", fixture::render(&merge2.words), merge2.logp.exp()));
        }
        Ok(problems)
    };
    let elapsed = start.elapsed();
    match run() {
        Ok(p) if p.is_empty() && elapsed < Duration::from_secs(1) => {
            Verdict::new(true, format!("like I / like like 0.36 / I like 0.351 / B=2 I like, {elapsed:?}"))
        }
        Ok(p) => Verdict::new(false, format!("{p:?}, {elapsed:?}")),
        Err(e) => Verdict::new(false, e.to_string()),
    }
}

fn exactness_oracle() -> Verdict {
    let start = Instant::now();
    let sizes = OracleSizes { trials: 1000, max_slots: 6, max_words: 3, seed: 101 };
    let r = check_decoder(&sizes, |lat, t| length_control_decode(lat, t, 1, CollapseMode::NoMerge).map(|d| d.tokens));
    let elapsed = start.elapsed();
    let detail = format!("{} of {} (lattice, T) cases match, {elapsed:?}", r.passed, r.passed + r.failed);
    match r.counterexample {
        Some(c) => Verdict::new(false, format!("{detail}; first mismatch: {c}")),
        None => Verdict::new(elapsed < Duration::from_secs(60), detail),
    }
}

fn ctc_oracle() -> Verdict {
    let start = Instant::now();
    let r = check_ctc(&OracleSizes { trials: 1000, max_slots: 6, max_words: 3, seed: 202 });
    let elapsed = start.elapsed();
    let detail = format!("{} of {} marginal and partition checks within 1e-9, {elapsed:?}", r.passed, r.passed + r.failed);
    match r.counterexample {
        Some(c) => Verdict::new(false, format!("{detail}; first mismatch: {c}")),
        None => Verdict::new(elapsed < Duration::from_secs(60), detail),
    }
}

/// Denominator floor for relative error, so coordinates whose true gradient is
/// below the finite-difference noise level are judged on absolute error.
const GRAD_FLOOR: f64 = 1e-6;

fn gradient_gate() -> Verdict {
    let vocab = 40;
    let config = ModelConfig::desk(vocab);
    let mut params = ModelParams::init(&config, 7).expect("valid config");
    let d = config.model_dim;
    let embed_len = config.output_dim() * d;
    let total = params.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    let (mut worst, mut worst_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    let mut worst_at = String::new();
    for pair in 0..20 {
        let len = rng.random_range(4..=16);
        let x: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let keep = rng.random_range(1..=len / 2);
        let mut picks: Vec<usize> = sample(&mut rng, len, keep).into_vec();
        picks.sort_unstable();
        let y: Vec<usize> = picks.iter().map(|&i| x[i]).collect();
        let (_, grad) = loss_and_grad(&params, &x, &y).expect("alignable pair");
        // Embedding rows of absent tokens have an identically zero gradient.
        let mut live: Vec<usize> = Vec::new();
        let mut ids = x.clone();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            live.extend(id * d..(id + 1) * d);
        }
        live.extend(embed_len..total);
        for _ in 0..50 {
            let i = live[rng.random_range(0..live.len())];
            let orig = params.get_flat(i);
            params.set_flat(i, orig + h);
            let up = loss_and_grad(&params, &x, &y).unwrap().0;
            params.set_flat(i, orig - h);
            let down = loss_and_grad(&params, &x, &y).unwrap().0;
            params.set_flat(i, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.get_flat(i);
            let abs = (numeric - analytic).abs();
            let rel = abs / numeric.abs().max(analytic.abs()).max(GRAD_FLOOR);
            worst_abs = worst_abs.max(abs);
            if rel > worst {
                worst = rel;
                worst_at = format!("pair {pair} coord {i}: analytic {analytic:e}, numeric {numeric:e}");
            }
            checked += 1;
        }
    }
    Verdict::new(
        worst < 1e-4,
        format!("{checked} coordinates over 20 pairs, max relative error {worst:.2e} (max abs {worst_abs:.2e}; {worst_at})"),
    )
}

fn exact_length_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    let mut unreachable = 0;
    let trials = 10_000;
    for trial in 0..trials {
        let slots = rng.random_range(1..=32);
        let words = rng.random_range(1..=50);
        let lat = LogProbLattice::random(slots, words, 4.0, &mut rng);
        let t = rng.random_range(0..=slots);
        let beam = if trial % 2 == 0 { 1 } else { 6 };
        let mode = if (trial / 2) % 2 == 0 { CollapseMode::Merge } else { CollapseMode::NoMerge };
        // With a single word, merged outputs alternate word and blank.
        let reachable = !(mode == CollapseMode::Merge && words == 1 && t > slots.div_ceil(2));
        match length_control_decode(&lat, t, beam, mode) {
            Ok(d) if reachable && d.words.len() == t => {}
            Err(DecodeError::EmptyCell { .. }) if !reachable => unreachable += 1,
            other => failures.push(format!("S={slots} V={words} T={t} B={beam} {mode}: {other:?}")),
        }
        if truncate_decode(&lat, t).len() > t {
            failures.push(format!("truncate exceeded T={t} on S={slots} V={words}"));
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{trials} lattices, {} failures, {unreachable} single-word merge cases correctly reported unreachable{}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn search_bound() -> Verdict {
    let corpus = templated_corpus(500, 11);
    let (vocab, lm) = train_lm_stage(&corpus, 4, 0.1).expect("toy model");
    let table = word_vectors(16, 11);
    let scorer = Scorer { vocab: &vocab, lm: &lm, table: &table, gamma: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let inputs = templated_corpus(200, 12);
    let mut failures = Vec::new();
    let (mut optimal, mut soft_hits, mut soft_total) = (0, 0, 0);
    for (i, line) in inputs.iter().enumerate() {
        let tokens = tokenize(line).unwrap();
        let n = rng.random_range(3..=tokens.len().min(12));
        let tokens = &tokens[..n];
        let t = rng.random_range(1..n);
        let input = scorer.prepare(tokens).unwrap();
        let config = SearchConfig { target_length: t, gamma: 1.0, steps: 200, restarts: 1, rng_seed: i as u64 };
        let out = hill_climb_with(&input, &config, &scorer, &mut sentence_rng(config.rng_seed, 0)).unwrap();

        let mut best = f64::NEG_INFINITY;
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize == t {
                let mask: Vec<bool> = (0..n).map(|k| bits >> k & 1 == 1).collect();
                best = best.max(scorer.evaluate(&input, &mask).unwrap().0);
            }
        }
        if !out.trace.windows(2).all(|w| w[0] < w[1]) {
            failures.push(format!("input {i}: trace not strictly increasing: {:?}", out.trace));
        }
        if out.score > best {
            failures.push(format!("input {i}: score {} above exhaustive maximum {best}", out.score));
        }
        if out.score == best {
            optimal += 1;
        }
        if i < 50 {
            let many = SearchConfig { restarts: 20, ..config };
            let r = hill_climb_with(&input, &many, &scorer, &mut sentence_rng(many.rng_seed, 1)).unwrap();
            soft_total += 1;
            soft_hits += usize::from(r.score == best);
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "200 inputs, {} failures; single restart reached the optimum on {optimal}, 20 restarts on {soft_hits}/{soft_total} (not asserted){}",
            failures.len(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn end_to_end(dir: &std::path::Path) -> Verdict {
    let start = Instant::now();
    fs::write(dir.join("corpus.txt"), templated_corpus(2000, 0).join("\n")).unwrap();
    fs::write(dir.join("vectors.txt"), vectors_text(&word_vectors(16, 0))).unwrap();
    let mut config = PipelineConfig::new(dir.join("corpus.txt"), dir.join("vectors.txt"), dir.join("work"));
    config.search.target_length = 5;
    config.decode.length = 5;
    config.optim.epochs = 10;
    let out = match cmd_pipeline(&config) {
        Ok(o) => o,
        Err(e) => return Verdict::new(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let losses = &out.train.epoch_losses;
    let total = out.report.r1.f1 + out.report.r2.f1 + out.report.rl.f1;
    let exact = out.summaries.iter().all(|s| s.split_whitespace().count() == 5);
    Verdict::new(
        elapsed < Duration::from_secs(15 * 60) && losses[9] < losses[0] && total >= 50.0 && exact,
        format!(
            "{elapsed:.1?}; loss epoch 1 {:.3} -> epoch 10 {:.3}; R-1/R-2/R-L F1 {:.2}/{:.2}/{:.2} (total {total:.2}); all summaries 5 words: {exact}",
            losses[0], losses[9], out.report.r1.f1, out.report.r2.f1, out.report.rl.f1
        ),
    )
}

/// Mean seconds per lattice, best of several interleaved rounds.
fn relative_timing(dir: &std::path::Path) -> Verdict {
    let work = dir.join("work");
    let (params, vocab) = match (load_checkpoint(&work.join("model.ckpt")), Vocab::load(&work.join("vocab.txt"))) {
        (Ok(p), Ok(v)) => (p, v),
        _ => return Verdict::new(false, "end-to-end artifacts missing"),
    };
    let inputs = templated_corpus(500, 505);
    let lattices: Vec<LogProbLattice> =
        inputs.iter().map(|l| forward(&params, &vocab.encode(&tokenize(l).unwrap())).unwrap()).collect();
    let t = 5;
    let beams = [1usize, 2, 4, 6, 8];
    let mut trunc = f64::INFINITY;
    let mut lc = [f64::INFINITY; 5];
    let time = |f: &dyn Fn(&LogProbLattice) -> usize| {
        let start = Instant::now();
        let mut sink = 0;
        for lat in &lattices {
            sink += f(lat);
        }
        std::hint::black_box(sink);
        start.elapsed().as_secs_f64() / lattices.len() as f64
    };
    for _ in 0..7 {
        trunc = trunc.min(time(&|lat| truncate_decode(lat, t).len()));
        for (k, &b) in beams.iter().enumerate() {
            lc[k] = lc[k].min(time(&|lat| length_control_decode(lat, t, b, CollapseMode::Merge).unwrap().words.len()));
        }
    }
    let lc6 = lc[3];
    // Least-squares line through (B, time).
    let n = beams.len() as f64;
    let xs: Vec<f64> = beams.iter().map(|&b| b as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, lc.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&lc).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let intercept = my - slope * mx;
    let fit_err = xs.iter().zip(&lc).map(|(x, y)| ((intercept + slope * x) - y).abs() / y).fold(0.0, f64::max);
    let us = |s: f64| s * 1e6;
    Verdict::new(
        trunc < lc6 && lc6 < 25.0 * trunc && fit_err <= 0.2,
        format!(
            "truncate {:.2} us, length-control B=6 {:.2} us ({:.1}x); B=1,2,4,6,8: {:.2?} us, linear fit error {:.1}%",
            us(trunc),
            us(lc6),
            lc6 / trunc,
            lc.iter().map(|&s| us(s)).collect::<Vec<_>>(),
            100.0 * fit_err
        ),
    )
}

fn rouge_fixtures() -> Verdict {
    let w = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let tol = 1e-9;
    let two_thirds = 200.0 / 3.0;
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let p = rouge_n(&w("a b c"), &w("a b c"), 1);
    checks.push(("identical rouge-1", p.precision == 100.0 && p.recall == 100.0 && p.f1 == 100.0));
    let p = rouge_n(&w("a b"), &w("c d"), 1);
    checks.push(("disjoint rouge-1", p.precision == 0.0 && p.recall == 0.0 && p.f1 == 0.0));
    let p = rouge_n(&w("a b c"), &w("a c d"), 1);
    checks.push(("a b c / a c d", close(p.precision, two_thirds, tol) && close(p.recall, two_thirds, tol) && close(p.f1, two_thirds, tol)));
    let p = rouge_l(&w("a b c"), &w("a b c"));
    checks.push(("identical rouge-l", p.f1 == 100.0));
    let p = rouge_l(&w("a x b"), &w("a b"));
    checks.push(("a x b / a b", p.recall == 100.0 && close(p.precision, two_thirds, tol)));
    checks.push(("empty prediction", rouge_l::<&str, &str>(&[], &w("a b")).f1 == 0.0));
    let r = truncated_recall(&w("a b c"), &w("a b c"), 100, BudgetUnit::Chars);
    checks.push(("budget above length", r.r1 == 100.0 && r.rl == 100.0));
    let r = truncated_recall(&w("hello world"), &w("hello world"), 3, BudgetUnit::Chars);
    checks.push(("budget below first token", r.r1 == 0.0 && r.r2 == 0.0 && r.rl == 0.0));
    // 13 five-char tokens plus "ab" make 80 chars; 12 tokens (71 chars) fit in 75.
    let mut long: Vec<String> = (0..13).map(|i| format!("w{i:04}")).collect();
    long.push("ab".into());
    let r = truncated_recall(&long, &long, 75, BudgetUnit::Chars);
    checks.push(("80-char prediction", long.join(" ").len() == 80 && close(r.r1, 1200.0 / 14.0, tol) && close(r.r2, 1100.0 / 13.0, tol)));
    let rep = evaluate_lines(&["a b c", "a x b", "q"], &["a c d", "a b", "q"], Protocol::F1).unwrap();
    checks.push(("3-pair means", close(rep.r1.f1, (two_thirds + 80.0 + 100.0) / 3.0, tol) && rep.r2.f1 == 0.0 && close(rep.rl.f1, (two_thirds + 80.0 + 100.0) / 3.0, tol)));
    let same = ["the cat sat .", "a dog ran home", "on monday , the bank sold its loan ."];
    let rep = evaluate_lines(&same, &same, Protocol::F1).unwrap();
    let all100 = [rep.r1, rep.r2, rep.rl].iter().all(|p| p.precision == 100.0 && p.recall == 100.0 && p.f1 == 100.0);
    checks.push(("identical corpus scores 100", all100));
    checks.push(("self delta is zero", rep.delta_against(&rep) == 0.0));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Verdict::new(failed.is_empty(), format!("{} fixtures, failed: {failed:?}", checks.len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("worked two-slot example", Box::new(worked_example)),
        ("no-merge B=1 exactness oracle", Box::new(exactness_oracle)),
        ("CTC marginal oracle", Box::new(ctc_oracle)),
        ("gradient gate", Box::new(gradient_gate)),
        ("exact-length fuzz", Box::new(exact_length_fuzz)),
        ("search monotonicity and bound", Box::new(search_bound)),
        ("end-to-end smoke", Box::new(|| end_to_end(dir.path()))),
        ("relative decode timing", Box::new(|| relative_timing(dir.path()))),
        ("ROUGE fixtures", Box::new(rouge_fixtures)),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let v = run();
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
