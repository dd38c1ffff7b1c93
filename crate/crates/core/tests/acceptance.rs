//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use callmask::dataset::{
    normalize_whitespace, render_prompt, similar_functions, SamplingConfig, TermFrequencyEmbedding,
    EVAL_CANDIDATES,
};
use callmask::decoder::{decode_greedy, decode_unmasked, new_session, DecodeError, MaskVector, Vocabulary};
use callmask::eval::{eval_vocabulary, make_mock, run_eval, EvalConfig, MatchMode, MockVariant, MockLm};
use callmask::metrics::{
    loss_masked, loss_unmasked, precision_indicator, theorem_loss_check, theorem_precision_check,
    StepRecord,
};
use callmask::schema::{
    load_registry, parse_call, render_call, ArgSpec, ArgType, FunctionRegistry, FunctionSchema,
};
use callmask::trie::{PrefixSet, Trie};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("loss dominance", Duration::from_secs(10), loss_dominance),
        ("precision dominance", Duration::from_secs(60), precision_dominance),
        ("format guarantee", Duration::from_secs(120), format_guarantee),
        ("anti-hallucination", Duration::from_secs(10), anti_hallucination),
        ("masked >= unmasked accuracy", Duration::from_secs(300), masked_accuracy),
        ("trie fidelity", Duration::from_secs(10), trie_fidelity),
        ("template fidelity", Duration::from_secs(1), template_fidelity),
        ("dataset protocol", Duration::from_secs(5), dataset_protocol),
    ];
    let mut failures = 0;
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= limit;
        let pass = out.pass && in_time;
        failures += usize::from(!pass);
        println!(
            "{} {name}: {} [{:.2}s, limit {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", too slow" }
        );
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

/// Independent recomputation of both losses straight from the definition.
fn oracle_losses(dist: &[f64], gold: usize, mask: &[bool]) -> (f64, f64) {
    let total: f64 = dist.iter().sum();
    let kept: f64 = dist.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
    (-(dist[gold] / kept).ln(), -(dist[gold] / total).ln())
}

fn loss_dominance() -> Outcome {
    let small = theorem_loss_check(10_000, 32, 1);
    let large = theorem_loss_check(1_000, 1000, 2);
    let mut violations = small.violations.len() + large.violations.len();

    // cross-check the library losses against the oracle on fresh trials
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut strict_checked = 0;
    for _ in 0..2_000 {
        let n = rng.gen_range(2..64);
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(3) + 1e-9).collect();
        let s: f64 = w.iter().sum();
        let dist: Vec<f64> = w.iter().map(|x| x / s).collect();
        let gold = rng.gen_range(0..n);
        let keep = rng.gen::<f64>();
        let mask: Vec<bool> = (0..n).map(|i| i == gold || rng.gen_bool(keep)).collect();
        let removed: f64 = dist.iter().zip(&mask).filter(|(_, &m)| !m).map(|(p, _)| p).sum();
        let rec = StepRecord::new(dist.clone(), gold, MaskVector::from_bools(mask.clone()));
        let (lm, lu) = (loss_masked(&rec).unwrap(), loss_unmasked(&rec).unwrap());
        let (om, ou) = oracle_losses(&dist, gold, &mask);
        if (lm - om).abs() > 1e-9 || (lu - ou).abs() > 1e-9 {
            mismatches += 1;
        }
        if lm > lu || (removed > 1e-12 && lm >= lu) {
            violations += 1;
        }
        strict_checked += usize::from(removed > 1e-12);
    }
    check(
        violations == 0 && mismatches == 0 && small.strict_trials > 0 && large.strict_trials > 0,
        format!(
            "{} trials at |V|=32 and {} at |V|=1000, {} strict and {} full-mask, {violations} violations, \
             {mismatches} oracle mismatches over 2000 extra trials ({strict_checked} strict)",
            small.trials,
            large.trials,
            small.strict_trials + large.strict_trials,
            small.equal_trials + large.equal_trials
        ),
    )
}

fn precision_dominance() -> Outcome {
    let reports: Vec<_> = (4..=8usize)
        .into_par_iter()
        .map(|n| theorem_precision_check(n, 1_000, n as u64))
        .collect();
    let checks: usize = reports.iter().map(|r| r.checks).sum();
    let violations: usize = reports.iter().map(|r| r.violations.len()).sum();
    let improved: usize = reports.iter().map(|r| r.improvements).sum();
    let expected: usize = (4..=8usize).map(|n| 1_000 * n * (1 << (n - 1))).sum();

    // brute-force argmax oracle against the indicator on random inputs
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..5_000 {
        let n = rng.gen_range(1..9);
        let dist: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0u8..3))).collect();
        let gold = rng.gen_range(0..n);
        let mask: Vec<bool> = (0..n).map(|i| i == gold || rng.gen()).collect();
        let best = |allowed: &dyn Fn(usize) -> bool| {
            let mut top: Option<usize> = None;
            for i in (0..n).filter(|&i| allowed(i)) {
                if top.is_none_or(|t| dist[i] > dist[t]) {
                    top = Some(i);
                }
            }
            top
        };
        let masked_oracle = u8::from(best(&|i| mask[i]) == Some(gold));
        let unmasked_oracle = u8::from(best(&|_| true) == Some(gold));
        let rec = StepRecord::new(dist.clone(), gold, MaskVector::from_bools(mask.clone()));
        if precision_indicator(&rec, true).unwrap() != masked_oracle
            || precision_indicator(&rec, false).unwrap() != unmasked_oracle
        {
            mismatches += 1;
        }
    }
    check(
        violations == 0 && checks == expected && mismatches == 0,
        format!(
            "{checks} (distribution, gold, mask) checks over |V|=4..8, {improved} improved, \
             {violations} violations, {mismatches} oracle mismatches"
        ),
    )
}

fn mock(variant: MockVariant, seed: u64, entry: usize, script: Vec<u32>, vocab: &Arc<Vocabulary>) -> MockLm {
    MockLm::new(variant, script, Arc::clone(vocab), seed, entry as u64)
}

fn format_guarantee() -> Outcome {
    let data = fixture_eval_set(0);
    let vocab = Arc::new(eval_vocabulary(&data));
    let variants = [
        ("random", MockVariant::Random),
        ("noisy0.1", MockVariant::Noisy { eps: 0.1 }),
        ("noisy0.3", MockVariant::Noisy { eps: 0.3 }),
        ("noisy0.5", MockVariant::Noisy { eps: 0.5 }),
    ];
    let n = data.len();
    let jobs: Vec<(usize, u64, usize)> = (0..variants.len())
        .flat_map(|v| (0..100u64).flat_map(move |s| (0..n).map(move |e| (v, s, e))))
        .collect();
    // (variant, masked failures, unmasked parse failures)
    let results: Vec<(usize, bool, bool)> = jobs
        .par_iter()
        .map(|&(v, seed, e)| {
            let entry = &data[e];
            let registry = entry.registry();
            let script = vocab.encode(&render_call(&entry.gold)).unwrap();
            let lm = mock(variants[v].1.clone(), seed, e, script, &vocab);
            let state = new_session(&registry, Arc::clone(&vocab)).unwrap();
            let masked_bad = match decode_greedy(&lm, state.clone(), 4096) {
                // re-parse the rendered text independently of the decoder
                Ok((call, _)) => parse_call(&render_call(&call), &registry).is_err(),
                Err(_) => true,
            };
            let unmasked_bad = match decode_unmasked(&lm, state, 4096) {
                Ok((text, _)) => parse_call(&text, &registry).is_err(),
                Err(DecodeError::BudgetExhausted { .. }) => true,
                Err(_) => true,
            };
            (v, masked_bad, unmasked_bad)
        })
        .collect();
    let mut masked_fail = [0usize; 4];
    let mut unmasked_fail = [0usize; 4];
    for (v, m, u) in results {
        masked_fail[v] += usize::from(m);
        unmasked_fail[v] += usize::from(u);
    }
    let per: Vec<String> = variants
        .iter()
        .enumerate()
        .map(|(i, (name, _))| format!("{name} {}/{}", masked_fail[i], unmasked_fail[i]))
        .collect();
    check(
        masked_fail.iter().all(|&f| f == 0) && unmasked_fail[3] >= 1,
        format!(
            "{} decodes per mode; masked/unmasked parse failures: {}",
            jobs.len(),
            per.join(", ")
        ),
    )
}

fn anti_hallucination() -> Outcome {
    let registry = FunctionRegistry::new(vec![FunctionSchema::new(
        "send_emil",
        "Send an email.",
        vec![
            ArgSpec::new("to", ArgType::String, "Recipient address.").unwrap(),
            ArgSpec::new("subject", ArgType::String, "Subject line.").unwrap(),
        ],
    )
    .unwrap()])
    .unwrap();
    let vocab = Arc::new(Vocabulary::char_level_with(["<nexa_end>"]));
    let variant = MockVariant::Biased {
        attractors: vec!["send_email".into()],
        strength: 0.9,
    };
    let (masked_ok, unmasked_hallucinated): (Vec<bool>, Vec<bool>) = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let lm = mock(variant.clone(), seed, 0, Vec::new(), &vocab);
            let state = new_session(&registry, Arc::clone(&vocab)).unwrap();
            let masked = decode_greedy(&lm, state.clone(), 4096)
                .map(|(call, _)| call.function == "send_emil" && render_call(&call).starts_with("send_emil("))
                .unwrap_or(false);
            let text = match decode_unmasked(&lm, state, 4096) {
                Ok((text, _)) => text,
                Err(DecodeError::BudgetExhausted { text, .. }) => text,
                Err(_) => String::new(),
            };
            (masked, text.starts_with("send_email"))
        })
        .unzip();
    let m = masked_ok.iter().filter(|&&b| b).count();
    let u = unmasked_hallucinated.iter().filter(|&&b| b).count();
    check(
        m == 100 && u >= 1,
        format!("masked emitted send_emil(...) in {m}/100 seeds; unmasked emitted send_email in {u}/100"),
    )
}

fn masked_accuracy() -> Outcome {
    let registry = mixed_registry();
    let (positives, negatives) = mixed_specs(100, 7);
    let data = callmask::dataset::build_eval_set(&registry, &positives, &negatives, 7).unwrap();
    let solvable = data.iter().filter(|d| d.solvable).count();
    let vocab = Arc::new(eval_vocabulary(&data));
    let mut runs = Vec::new();
    let mut ok = data.len() == 200 && solvable == 100;
    for seed in 0..10u64 {
        let spec = make_mock(&format!("mock:noisy:eps=0.2,seed={seed}")).unwrap();
        let config = EvalConfig {
            masked: true,
            mode: MatchMode::Strict,
            max_tokens: 4096,
            jobs: 0,
        };
        let masked = run_eval(&data, &spec, Arc::clone(&vocab), &config).unwrap();
        let unmasked = run_eval(
            &data,
            &spec,
            Arc::clone(&vocab),
            &EvalConfig {
                masked: false,
                ..config
            },
        )
        .unwrap();
        ok &= masked.accuracy >= unmasked.accuracy && masked.breakdown.parse_failure == 0;
        runs.push(format!("{:.3}/{:.3}", masked.accuracy, unmasked.accuracy));
    }
    check(
        ok,
        format!("200 entries ({solvable} solvable), masked/unmasked accuracy per seed: {}", runs.join(" ")),
    )
}

fn trie_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let alphabet: Vec<char> = "abcde_".chars().collect();
    let word = |rng: &mut ChaCha8Rng, max: usize| -> String {
        let len = rng.gen_range(1..=max);
        (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    let mut queries = 0;
    let mut mismatches = 0;
    let mut visit_violations = 0;
    for _ in 0..100 {
        let count = rng.gen_range(1..30);
        let words: Vec<String> = (0..count).map(|_| word(&mut rng, 8)).collect();
        let trie = Trie::from_words(&words).unwrap();
        let set = PrefixSet::build(&words).unwrap();
        for _ in 0..100 {
            queries += 1;
            let q = if rng.gen_bool(0.5) {
                let w = &words[rng.gen_range(0..words.len())];
                let cut = rng.gen_range(0..=w.len());
                w[..cut].to_string()
            } else {
                word(&mut rng, 10)
            };
            let naive = words.iter().any(|w| w.starts_with(&q));
            let (t, visits) = trie.is_prefix_counted(&q);
            let s = q.is_empty() || set.contains_prefix(&q);
            if t != naive || s != naive {
                mismatches += 1;
            }
            if visits > q.chars().count() + 1 {
                visit_violations += 1;
            }
            let mut want: Vec<String> = words.iter().filter(|w| w.starts_with(&q)).cloned().collect();
            want.sort();
            want.dedup();
            if trie.search(&q, true) != want {
                mismatches += 1;
            }
            let stripped: Vec<String> = want.iter().map(|w| w[q.len()..].to_string()).collect();
            if trie.search(&q, false) != stripped {
                mismatches += 1;
            }
        }
        let want: BTreeSet<String> = words
            .iter()
            .flat_map(|w| (1..=w.len()).map(move |i| w[..i].to_string()))
            .collect();
        if trie.get_all_prefixes() != want.into_iter().collect::<Vec<_>>() {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0 && visit_violations == 0 && queries == 10_000,
        format!("{queries} queries over 100 word sets, {mismatches} mismatches, {visit_violations} visit-bound violations"),
    )
}

fn template_fidelity() -> Outcome {
    let expected = fixture("template_prompt.txt");
    let registry = ds_eg1_registry();
    let response_line = expected
        .lines()
        .find_map(|l| l.strip_prefix("Response:"))
        .expect("template has a response line");
    let thought = expected
        .lines()
        .find_map(|l| l.strip_prefix("Thought:"))
        .expect("template has a thought line");
    let query = "Obtain download access for viewing a recent Instagram post offline using the URL https://www.instagram.com/p/CODEinstantiate123/";
    let call = match parse_call(response_line, &registry) {
        Ok(c) => c,
        Err(e) => return check(false, format!("response line rejected: {e}")),
    };
    let prompt = render_prompt(registry.functions(), query, Some(&call.render_body()), Some(thought)).unwrap();
    let equal = normalize_whitespace(&prompt) == normalize_whitespace(&expected);
    let exact_response = render_call(&call) == response_line;
    check(
        equal && exact_response && call.function == "insta_download_url",
        format!(
            "rendered prompt {} the template after whitespace normalization; response line re-renders {}",
            if equal { "equals" } else { "differs from" },
            if exact_response { "byte-exact" } else { "differently" }
        ),
    )
}

/// Exact term-frequency cosine over word counts, without hashing.
fn oracle_similarity(a: &str, b: &str) -> f64 {
    let counts = |s: &str| {
        let mut m: HashMap<String, f64> = HashMap::new();
        for w in s.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()) {
            *m.entry(w.to_ascii_lowercase()).or_default() += 1.0;
        }
        m
    };
    let (x, y) = (counts(a), counts(b));
    let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0)).sum();
    let norm = |m: &HashMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (norm(&x) * norm(&y))
}

fn dataset_protocol() -> Outcome {
    let mut problems = Vec::new();
    let set = fixture_eval_set(3);
    let solvable = set.iter().filter(|d| d.solvable).count();
    if set.len() != 20 || solvable != 10 {
        problems.push(format!("{} entries, {solvable} solvable", set.len()));
    }
    for d in &set {
        let names: BTreeSet<&str> = d.functions.iter().map(|f| f.name.as_str()).collect();
        let candidates = d.functions.iter().filter(|f| !f.is_sentinel()).count();
        if d.functions.len() != EVAL_CANDIDATES + 1
            || candidates != EVAL_CANDIDATES
            || names.len() != d.functions.len()
            || !d.functions.iter().any(FunctionSchema::is_sentinel)
            || d.check().is_err()
        {
            problems.push(format!("bad entry for {:?}", d.query));
        }
    }

    // twelve functions; f_i shares 12 - i of the target's twelve words
    let target_words: Vec<String> = (0..12).map(|i| format!("topic{i}")).collect();
    let mut entries = vec![format!(
        r#"{{"name": "f_00", "description": "{}", "args": []}}"#,
        target_words.join(" ")
    )];
    for i in 1..12 {
        let shared = &target_words[..12 - i];
        let filler: Vec<String> = (0..i).map(|j| format!("other{i}x{j}")).collect();
        entries.push(format!(
            r#"{{"name": "f_{i:02}", "description": "{} {}", "args": []}}"#,
            shared.join(" "),
            filler.join(" ")
        ));
    }
    let registry = load_registry(&format!("[{}]", entries.join(","))).unwrap();
    let embedder = TermFrequencyEmbedding::for_registry(&registry);
    let mut audited = 0;
    for target in registry.candidates() {
        // full similarity matrix row, ranked descending with name tie-break
        let mut row: Vec<(&str, f64)> = registry
            .candidates()
            .filter(|f| f.name != target.name)
            .map(|f| (f.name.as_str(), oracle_similarity(&target.description, &f.description)))
            .collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let rank: HashMap<&str, usize> = row.iter().enumerate().map(|(i, (n, _))| (*n, i + 1)).collect();
        for seed in 0..20 {
            let config = SamplingConfig {
                seed,
                ..SamplingConfig::default()
            };
            let picked = similar_functions(&registry, target, &config, &embedder).unwrap();
            let distinct: BTreeSet<&str> = picked.iter().map(|f| f.name.as_str()).collect();
            audited += 1;
            if picked.len() != 3
                || distinct.len() != 3
                || picked.iter().any(|f| f.name == target.name || f.is_sentinel())
                || picked.iter().any(|f| !(5..=10).contains(&rank[f.name.as_str()]))
            {
                problems.push(format!("target {} seed {seed}: {:?}", target.name, distinct));
            }
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("20 entries with 4 candidates + sentinel, 10 solvable; {audited} similar-function draws all within ranks 5..10")
        } else {
            problems.join("; ")
        },
    )
}
