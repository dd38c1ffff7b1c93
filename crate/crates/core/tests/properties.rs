mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use callmask::dataset::{read_jsonl, write_jsonl};
use callmask::decoder::{
    apply_mask, argmax, decode_greedy, new_session, teacher_forced_trace, LanguageModel, MaskVector,
    Vocabulary,
};
use callmask::metrics::{loss_masked, loss_unmasked, sequence_report, StepRecord};
use callmask::schema::{
    parse_call, parse_stub, render_call, render_stub, ArgSpec, ArgType, CallExpression, FunctionSchema,
    Value, END_MARKER,
};
use callmask::trie::{PrefixSet, Trie};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Next-token distribution drawn from a seed and the context.
struct RandomLm {
    seed: u64,
    vocab_len: usize,
    peaked: bool,
}

impl LanguageModel for RandomLm {
    fn next_distribution(&self, context: &[u32]) -> Vec<f64> {
        let key = context
            .iter()
            .fold(self.seed, |h, &t| h.wrapping_mul(0x100000001b3).wrapping_add(u64::from(t) + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut w: Vec<f64> = (0..self.vocab_len).map(|_| rng.gen::<f64>()).collect();
        if self.peaked {
            w.iter_mut().for_each(|x| *x = x.powi(8));
        }
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }
}

fn ident() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn string_body() -> impl Strategy<Value = String> {
    "[ -&(-~]{0,12}"
}

fn dict_value(depth: u32) -> BoxedStrategy<Value> {
    let leaf = prop_oneof![
        string_body().prop_map(Value::Str),
        any::<i64>().prop_map(Value::Int),
        (-1e9f64..1e9).prop_map(Value::Float),
        any::<bool>().prop_map(Value::Bool),
    ];
    if depth >= 4 {
        return leaf.boxed();
    }
    prop_oneof![
        3 => leaf,
        1 => prop::collection::vec((string_body(), dict_value(depth + 1)), 0..3).prop_map(Value::Dict),
    ]
    .boxed()
}

fn arg_type() -> impl Strategy<Value = ArgType> {
    prop_oneof![
        Just(ArgType::String),
        Just(ArgType::Integer),
        Just(ArgType::Float),
        Just(ArgType::Boolean),
        Just(ArgType::Dict),
        prop::collection::btree_set("[A-Za-z][a-z ]{0,5}", 1..4)
            .prop_map(|s| ArgType::Enum(s.into_iter().collect())),
    ]
}

fn value_for(ty: &ArgType) -> BoxedStrategy<Value> {
    match ty {
        ArgType::String => string_body().prop_map(Value::Str).boxed(),
        ArgType::Integer => any::<i64>().prop_map(Value::Int).boxed(),
        ArgType::Float => prop_oneof![
            (-1e12f64..1e12).prop_map(Value::Float),
            (-1e300f64..1e300).prop_map(Value::Float),
        ]
        .boxed(),
        ArgType::Boolean => any::<bool>().prop_map(Value::Bool).boxed(),
        ArgType::Dict => prop::collection::vec((string_body(), dict_value(2)), 0..4)
            .prop_map(Value::Dict)
            .boxed(),
        ArgType::Enum(values) => prop::sample::select(values.clone()).prop_map(Value::Enum).boxed(),
    }
}

fn schema() -> impl Strategy<Value = FunctionSchema> {
    (
        ident(),
        "[A-Za-z][a-z ,.]{0,20}",
        prop::collection::vec((ident(), arg_type(), "[a-z ]{0,12}"), 0..4),
    )
        .prop_filter_map("distinct argument names", |(name, desc, args)| {
            let names: BTreeSet<_> = args.iter().map(|a| a.0.clone()).collect();
            if names.len() != args.len() {
                return None;
            }
            let args = args
                .into_iter()
                .map(|(n, t, d)| ArgSpec::new(n, t, d))
                .collect::<Result<Vec<_>, _>>()
                .ok()?;
            FunctionSchema::new(name, desc, args).ok()
        })
}

fn schema_and_call() -> impl Strategy<Value = (FunctionSchema, CallExpression)> {
    schema().prop_flat_map(|f| {
        let values: Vec<_> = f.args.iter().map(|a| value_for(&a.ty)).collect();
        (Just(f.clone()), values).prop_map(|(f, vals)| {
            let call = CallExpression::new(f.name.clone(), vals);
            (f, call)
        })
    })
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 6 => 1e-9f64..1.0], 2..40).prop_map(|w| {
        let s: f64 = w.iter().sum();
        if s == 0.0 {
            w
        } else {
            w.into_iter().map(|x| x / s).collect()
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn trie_agrees_with_prefix_set_and_scan(
        words in prop::collection::vec("[abc_]{1,6}", 1..12),
        probes in prop::collection::vec("[abc_]{0,7}", 1..30),
    ) {
        let trie = Trie::from_words(&words).unwrap();
        let set = PrefixSet::build(&words).unwrap();
        for p in &probes {
            let naive = words.iter().any(|w| w.starts_with(p.as_str()));
            prop_assert_eq!(trie.is_prefix(p), naive, "{}", p);
            prop_assert_eq!(set.contains_prefix(p), naive, "{}", p);
            prop_assert_eq!(trie.contains(p), words.contains(p));
            prop_assert_eq!(set.contains_word(p), words.contains(p));
            let expect: BTreeSet<&String> = words.iter().filter(|w| w.starts_with(p.as_str())).collect();
            let found = trie.search(p, true);
            prop_assert_eq!(found.len(), expect.len());
            prop_assert_eq!(found.iter().collect::<BTreeSet<_>>(), expect);
        }
        let distinct: BTreeSet<&String> = words.iter().collect();
        prop_assert_eq!(trie.len(), distinct.len());
    }

    #[test]
    fn calls_round_trip((f, call) in schema_and_call()) {
        let registry = callmask::schema::FunctionRegistry::new(vec![f]).unwrap();
        let text = render_call(&call);
        prop_assert!(text.ends_with(END_MARKER));
        let back = parse_call(&text, &registry).unwrap();
        prop_assert_eq!(&back, &call);
        prop_assert_eq!(render_call(&back), text);
    }

    #[test]
    fn stubs_round_trip(f in schema()) {
        let text = render_stub(&f);
        prop_assert_eq!(parse_stub(&text).unwrap(), f);
    }

    #[test]
    fn masking_invariants(dist in distribution(), keep in prop::collection::vec(any::<bool>(), 40)) {
        let mut bools: Vec<bool> = keep[..dist.len()].to_vec();
        bools[0] = true;
        let mask = MaskVector::from_bools(bools);
        let m = apply_mask(&dist, &mask).unwrap();
        let total: f64 = m.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for i in mask.masked() {
            prop_assert_eq!(m.probs[i], 0.0);
            prop_assert_eq!(m.product[i], 0.0);
        }
        let kept_mass: f64 = mask.unmasked().map(|i| dist[i]).sum();
        prop_assert_eq!(m.fallback, kept_mass == 0.0);
        let chosen = argmax(&m.probs).unwrap();
        prop_assert!(mask.is_allowed(chosen));
        // never worse than the best kept token of the raw distribution
        let best = mask.unmasked().map(|i| dist[i]).fold(f64::MIN, f64::max);
        if !m.fallback {
            prop_assert_eq!(dist[chosen], best);
        }
    }

    #[test]
    fn loss_never_increases(dist in distribution(), keep in prop::collection::vec(any::<bool>(), 40), g in 0usize..40) {
        let gold = g % dist.len();
        prop_assume!(dist[gold] > 0.0);
        let mut bools: Vec<bool> = keep[..dist.len()].to_vec();
        bools[gold] = true;
        let rec = StepRecord::new(dist, gold, MaskVector::from_bools(bools));
        prop_assert!(loss_masked(&rec).unwrap() <= loss_unmasked(&rec).unwrap());
    }

    #[test]
    fn masked_decode_always_parses(seed in any::<u64>(), peaked in any::<bool>()) {
        let registry = common::mixed_registry();
        let vocab = Arc::new(Vocabulary::char_level_with([END_MARKER, "set_", "True", "', '"]));
        let lm = RandomLm { seed, vocab_len: vocab.len(), peaked };
        let state = new_session(&registry, Arc::clone(&vocab)).unwrap();
        match decode_greedy(&lm, state, 4096) {
            Ok((call, trace)) => {
                let text = vocab.decode(&trace.tokens());
                prop_assert_eq!(parse_call(&text, &registry).unwrap(), call);
            }
            Err(callmask::decoder::DecodeError::BudgetExhausted { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn datasets_round_trip_through_jsonl(seed in any::<u64>()) {
        let data = common::fixture_eval_set(seed);
        let back = read_jsonl(&write_jsonl(&data)).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn teacher_forcing_scores_gold(seed in any::<u64>(), index in 0usize..20) {
        let (positives, _) = common::mixed_specs(20, seed);
        let registry = common::mixed_registry();
        let vocab = Arc::new(Vocabulary::char_level_with([END_MARKER]));
        let gold = vocab.encode(&render_call(&positives[index].gold)).unwrap();
        let lm = RandomLm { seed, vocab_len: vocab.len(), peaked: false };
        let state = new_session(&registry, Arc::clone(&vocab)).unwrap();
        let trace = teacher_forced_trace(&lm, state, &gold).unwrap();
        let report = sequence_report(&trace, &gold).unwrap();
        prop_assert_eq!(report.steps, gold.len());
        prop_assert_eq!(report.gold_masked_steps, 0);
        prop_assert_eq!(report.scored_steps, gold.len());
        prop_assert!(report.mean_masked_loss <= report.mean_unmasked_loss);
        for (step, &g) in trace.steps.iter().zip(&gold) {
            let mask = step.mask.as_ref().unwrap();
            prop_assert!(mask.is_allowed(g as usize));
        }
    }
}
