#![allow(dead_code)]

use std::path::PathBuf;

use callmask::dataset::{build_eval_set, parse_negative_corpus, parse_positive_corpus, DataPoint, PositiveSpec};
use callmask::schema::{load_registry, ArgType, CallExpression, FunctionRegistry, Value};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn ds_eg1_registry() -> FunctionRegistry {
    load_registry(&fixture("ds_eg1.json")).unwrap()
}

/// The 20-entry evaluation set built from the shipped corpora.
pub fn fixture_eval_set(seed: u64) -> Vec<DataPoint> {
    let registry = ds_eg1_registry();
    let positives = parse_positive_corpus(&fixture("positives.tsv"), &registry).unwrap();
    let negatives = parse_negative_corpus(&fixture("negatives.txt"));
    build_eval_set(&registry, &positives, &negatives, seed).unwrap()
}

/// Registry mixing every argument type.
pub const MIXED_REGISTRY: &str = r#"[
  {"name": "get_weather", "description": "Current weather for a city.",
   "args": [{"name": "city", "type": "string", "description": "City name."},
            {"name": "unit", "type": "enum", "enum_values": ["celsius", "fahrenheit"], "description": "Temperature unit."}]},
  {"name": "set_alarm", "description": "Set an alarm clock.",
   "args": [{"name": "hour", "type": "integer", "description": "Hour of day."},
            {"name": "minute", "type": "integer", "description": "Minute."}]},
  {"name": "convert_currency", "description": "Convert money between currencies.",
   "args": [{"name": "amount", "type": "float", "description": "Amount to convert."},
            {"name": "source", "type": "enum", "enum_values": ["USD", "EUR", "JPY", "GBP"], "description": "From."},
            {"name": "target", "type": "enum", "enum_values": ["USD", "EUR", "JPY", "GBP"], "description": "To."}]},
  {"name": "toggle_wifi", "description": "Turn wifi on or off.",
   "args": [{"name": "enabled", "type": "boolean", "description": "Desired state."}]},
  {"name": "send_message", "description": "Send a text message.",
   "args": [{"name": "recipient", "type": "string", "description": "Who receives it."},
            {"name": "body", "type": "string", "description": "Message text."}]},
  {"name": "create_event", "description": "Create a calendar event.",
   "args": [{"name": "title", "type": "string", "description": "Event title."},
            {"name": "details", "type": "dict", "description": "Extra fields."}]},
  {"name": "set_volume", "description": "Set the speaker volume.",
   "args": [{"name": "level", "type": "integer", "description": "Volume from 0 to 100."}]},
  {"name": "lock_doors", "description": "Lock every door of the house.", "args": []}
]"#;

pub fn mixed_registry() -> FunctionRegistry {
    load_registry(MIXED_REGISTRY).unwrap()
}

const CITIES: &[&str] = &["Paris", "Lima", "Oslo", "Cairo", "Tokyo", "Austin"];
const NAMES: &[&str] = &["Ana", "Bo", "Chen", "Dev", "Eli"];
const BODIES: &[&str] = &["on my way", "see you soon", "call me", "running late"];
const TITLES: &[&str] = &["Standup", "Lunch", "Review", "Gym"];
const TOPICS: &[&str] = &["volcanoes", "jazz", "tides", "chess", "bread", "comets", "owls"];

fn random_value(rng: &mut ChaCha8Rng, ty: &ArgType, arg: &str) -> Value {
    match ty {
        ArgType::String => {
            let pool = match arg {
                "city" => CITIES,
                "recipient" => NAMES,
                "body" => BODIES,
                _ => TITLES,
            };
            Value::Str(pool.choose(rng).unwrap().to_string())
        }
        ArgType::Integer => Value::Int(rng.gen_range(0..60)),
        ArgType::Float => Value::Float(f64::from(rng.gen_range(1..2000)) / 4.0),
        ArgType::Boolean => Value::Bool(rng.gen()),
        ArgType::Enum(values) => Value::Enum(values.choose(rng).unwrap().clone()),
        ArgType::Dict => Value::Dict(vec![
            ("room".into(), Value::Str(rng.gen_range(1..9).to_string())),
            ("minutes".into(), Value::Int(rng.gen_range(5..90))),
        ]),
    }
}

/// `n` positives over the mixed registry with random arguments and `n`
/// unanswerable queries.
pub fn mixed_specs(n: usize, seed: u64) -> (Vec<PositiveSpec>, Vec<String>) {
    let registry = mixed_registry();
    let functions: Vec<_> = registry.candidates().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (0..n)
        .map(|i| {
            let f = &functions[i % functions.len()];
            let args: Vec<Value> = f.args.iter().map(|a| random_value(&mut rng, &a.ty, &a.name)).collect();
            let gold = CallExpression::new(f.name.clone(), args);
            PositiveSpec {
                query: format!("Please {} with {}", f.description.to_lowercase(), gold.render_body().replace('\'', "")),
                gold,
                thought: None,
            }
        })
        .collect();
    let negatives = (0..n)
        .map(|i| format!("Tell me a fact about {} number {i}", TOPICS[i % TOPICS.len()]))
        .collect();
    (positives, negatives)
}

/// Regular expressions for the response language, independent of the
/// incremental recognizers, plus an anchored DFA to query them.
pub mod lang {
    use callmask::schema::{ArgType, FunctionRegistry, END_MARKER};
    use regex_automata::dfa::{dense, Automaton, StartKind};
    use regex_automata::util::primitives::StateID;
    use regex_automata::{Anchored, Input, MatchKind};
    use std::collections::HashSet;

    pub const STR: &str = "'[ -&(-~]*'";
    pub const NUM: &str = r"-?[0-9]+(\.[0-9]+)?";
    pub const BOOL: &str = "(True|False)";

    pub fn dict_regex(depth: usize) -> String {
        let value = if depth < 4 {
            format!("({STR}|{NUM}|{BOOL}|{})", dict_regex(depth + 1))
        } else {
            format!("({STR}|{NUM}|{BOOL})")
        };
        format!(r"\{{({STR}: *{value}(, *{STR}: *{value})*)?\}}")
    }

    pub fn type_regex(ty: &ArgType) -> String {
        match ty {
            ArgType::String => STR.to_string(),
            ArgType::Integer => "-?[0-9]+".to_string(),
            ArgType::Float => r"-?[0-9]+\.[0-9]+".to_string(),
            ArgType::Boolean => BOOL.to_string(),
            ArgType::Dict => dict_regex(1),
            ArgType::Enum(values) => {
                let alts: Vec<String> = values.iter().map(|v| format!("'{}'", regex::escape(v))).collect();
                format!("({})", alts.join("|"))
            }
        }
    }

    pub fn language_regex(registry: &FunctionRegistry) -> String {
        let calls: Vec<String> = registry
            .functions()
            .iter()
            .map(|f| {
                let args: Vec<String> = f.args.iter().map(|a| type_regex(&a.ty)).collect();
                format!(r"{}\({}\)", f.name, args.join(", *"))
            })
            .collect();
        format!("({}){}", calls.join("|"), regex::escape(END_MARKER))
    }

    pub struct Oracle {
        dfa: dense::DFA<Vec<u32>>,
        live: HashSet<StateID>,
    }

    impl Oracle {
        pub fn new(pattern: &str) -> Self {
            let dfa = dense::Builder::new()
                .configure(
                    dense::Config::new()
                        .minimize(true)
                        .match_kind(MatchKind::All)
                        .start_kind(StartKind::Anchored),
                )
                .build(pattern)
                .unwrap();
            let start = dfa
                .start_state_forward(&Input::new("").anchored(Anchored::Yes))
                .unwrap();
            // matches are reported one byte late, so dead states are found
            // by backward reachability from accepting states instead
            let mut states = vec![start];
            let mut index = HashSet::from([start]);
            let mut edges = Vec::new();
            let mut i = 0;
            while i < states.len() {
                let s = states[i];
                for b in 0..=255u8 {
                    let t = dfa.next_state(s, b);
                    edges.push((s, t));
                    if index.insert(t) {
                        states.push(t);
                    }
                }
                i += 1;
            }
            let mut live: HashSet<StateID> = states
                .iter()
                .copied()
                .filter(|&s| dfa.is_match_state(dfa.next_eoi_state(s)))
                .collect();
            loop {
                let before = live.len();
                for &(s, t) in &edges {
                    if live.contains(&t) {
                        live.insert(s);
                    }
                }
                if live.len() == before {
                    break;
                }
            }
            Oracle { dfa, live }
        }

        pub fn start(&self) -> StateID {
            self.dfa
                .start_state_forward(&Input::new("").anchored(Anchored::Yes))
                .unwrap()
        }

        /// Steps over every byte of `ch`.
        pub fn step(&self, mut s: StateID, ch: char) -> StateID {
            let mut buf = [0u8; 4];
            for &b in ch.encode_utf8(&mut buf).as_bytes() {
                s = self.dfa.next_state(s, b);
            }
            s
        }

        pub fn is_dead(&self, s: StateID) -> bool {
            !self.live.contains(&s)
        }

        pub fn is_match(&self, s: StateID) -> bool {
            self.dfa.is_match_state(self.dfa.next_eoi_state(s))
        }

        pub fn run(&self, text: &str) -> StateID {
            text.chars().fold(self.start(), |s, ch| self.step(s, ch))
        }

        pub fn viable(&self, text: &str) -> bool {
            !self.is_dead(self.run(text))
        }

        pub fn complete(&self, text: &str) -> bool {
            self.is_match(self.run(text))
        }
    }
}
