//! Seeded corpus generators for tests, benchmarks and demos.
//!
//! All generators are deterministic in their seed and produce corpora whose
//! expected behaviour under the mock backends can be stated up front.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::loader::{BenchmarkQuestion, Corpus};
use crate::model::{CalendarDate, Role, Session};

const SYLLABLES: &[&str] = &[
    "zor", "vak", "quel", "tarn", "bim", "lo", "kes", "dra", "mon", "fel", "rix", "ula", "pen", "sor", "thal",
    "gri", "nov", "ama", "bel", "dun", "ost", "vir", "ka", "lem", "yth", "ser", "oda", "mir", "cal", "wen",
];

/// Unique capitalised nonsense words, so planted names never collide with
/// real vocabulary or stopwords.
struct NameGen {
    seen: HashSet<String>,
}

impl NameGen {
    fn new() -> Self {
        NameGen { seen: HashSet::new() }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let n = rng.random_range(2..=3);
            let word: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
            let mut chars = word.chars();
            let first = chars.next().expect("non-empty").to_ascii_uppercase();
            let name = format!("{first}{}", chars.as_str());
            if self.seen.insert(name.clone()) {
                return name;
            }
        }
    }
}

fn base_date() -> CalendarDate {
    CalendarDate::from_ymd(2023, 1, 1).expect("valid date")
}

/// (planted sentence, question). `{N}` is the person, `{A}` the answer,
/// `{Y}` a year. Every content word of the question occurs in the sentence.
const TEMPLATES: &[(&str, &str)] = &[
    ("My friend {N} decided to move to {A} in {Y}.", "Where did my friend {N} move in {Y}?"),
    ("My cousin {N} adopted a puppy named {A} in {Y}.", "What is the puppy my cousin {N} adopted in {Y} named?"),
    ("My coworker {N} is reading a novel called {A} since {Y}.", "Which novel is my coworker {N} reading since {Y}?"),
    ("My neighbor {N} is training for a marathon in {A} in {Y}.", "Where is my neighbor {N} training for a marathon in {Y}?"),
    ("My sister {N} was hired by a startup called {A} in {Y}.", "Which startup was my sister {N} hired by in {Y}?"),
    ("My uncle {N} bought a sailboat called {A} in {Y}.", "What is the sailboat my uncle {N} bought in {Y} called?"),
    ("My mentor {N} is teaching a workshop at {A} in {Y}.", "Where is my mentor {N} teaching a workshop in {Y}?"),
    ("My roommate {N} was born in {A} in {Y}.", "Where was my roommate {N} born in {Y}?"),
    ("My teammate {N} is studying pottery with {A} since {Y}.", "Who is my teammate {N} studying pottery with since {Y}?"),
    ("My aunt {N} opened a bakery called {A} in {Y}.", "What is the bakery my aunt {N} opened in {Y} called?"),
];

/// Sentences with no digits, copulas or capitalised content words: they add
/// vocabulary to a session without adding facts or graph entities.
const FILLERS: &[&str] = &[
    "I spent the whole afternoon cleaning out the garage.",
    "We cooked a huge pot of vegetable soup for dinner.",
    "I finally finished reading that long history book.",
    "We watched a documentary about deep sea creatures.",
    "I tried a new running route along the river.",
    "We played board games until late at night.",
    "I repainted the old bookshelf a dark green color.",
    "We ordered pizza and talked about summer plans.",
    "I fixed the squeaky hinge on the kitchen door.",
    "We walked around the farmers market for hours.",
    "I sorted every photo from the holidays into albums.",
    "We listened for hours as the rain fell outside.",
];

const REPLIES: &[&str] = &[
    "That sounds lovely.",
    "Thanks for sharing that with me.",
    "How exciting!",
    "Tell me more whenever you like.",
];

fn fill(template: &str, name: &str, answer: &str, year: u32) -> String {
    template
        .replace("{N}", name)
        .replace("{A}", answer)
        .replace("{Y}", &year.to_string())
}

pub const BENCHMARK_SESSIONS: usize = 100;
pub const BENCHMARK_QUESTIONS: usize = 20;
const EVIDENCE_FILLERS: usize = 4;

/// Planted-evidence benchmark: 20 questions, each answered by one long
/// session (planted sentence first, then filler), and 80 short distractor
/// sessions that reuse the question templates with other names and years.
///
/// Distractors share most of their vocabulary with the evidence. Scoring a
/// whole session against the query favours the short distractors, while
/// derived keys and entity descriptions isolate the planted sentence.
pub fn benchmark(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = NameGen::new();
    let mut sessions: Vec<(String, Vec<(Role, String)>)> = Vec::new();
    let mut questions = Vec::new();
    let mut used_years: Vec<HashSet<u32>> = vec![HashSet::new(); TEMPLATES.len()];

    for q in 0..BENCHMARK_QUESTIONS {
        let t = q % TEMPLATES.len();
        let (sentence, question) = TEMPLATES[t];
        let (name, answer) = (names.next(&mut rng), names.next(&mut rng));
        let year = loop {
            let y = rng.random_range(1990..2023);
            if used_years[t].insert(y) {
                break y;
            }
        };
        let mut fillers: Vec<&str> = FILLERS.choose_multiple(&mut rng, EVIDENCE_FILLERS).copied().collect();
        fillers.shuffle(&mut rng);
        let raw_id = format!("e{q:02}");
        let turns = vec![
            (Role::User, fill(sentence, &name, &answer, year)),
            (Role::Assistant, REPLIES.choose(&mut rng).expect("non-empty").to_string()),
            (Role::User, fillers[..2].join(" ")),
            (Role::Assistant, REPLIES.choose(&mut rng).expect("non-empty").to_string()),
            (Role::User, fillers[2..].join(" ")),
        ];
        sessions.push((raw_id.clone(), turns));
        questions.push((q, t, name, answer, year, raw_id, question));
    }
    for d in 0..BENCHMARK_SESSIONS - BENCHMARK_QUESTIONS {
        let t = d % TEMPLATES.len();
        let (name, answer) = (names.next(&mut rng), names.next(&mut rng));
        let year = rng.random_range(1990..2023);
        sessions.push((
            format!("d{d:02}"),
            vec![
                (Role::User, fill(TEMPLATES[t].0, &name, &answer, year)),
                (Role::Assistant, REPLIES.choose(&mut rng).expect("non-empty").to_string()),
            ],
        ));
    }
    sessions.shuffle(&mut rng);

    let name = "synthetic";
    let sessions: Vec<Session> = sessions
        .into_iter()
        .enumerate()
        .map(|(i, (raw, turns))| Session::new(format!("{name}/{raw}"), base_date().add_days(i as i64), turns))
        .collect();
    let question_date = base_date().add_days(sessions.len() as i64);
    let questions = questions
        .into_iter()
        .map(|(q, t, person, answer, year, raw_id, question)| BenchmarkQuestion {
            question_id: format!("q{q:02}"),
            question_text: fill(question, &person, &answer, year),
            question_date: Some(question_date),
            answer_text: answer,
            evidence_session_ids: vec![format!("{name}/{raw_id}")],
            question_type: format!("template-{t}"),
            haystack_session_ids: None,
            unresolved_evidence: Vec::new(),
        })
        .collect();
    Corpus {
        name: name.into(),
        sessions,
        questions,
        ..Default::default()
    }
}

const PREDICATES: &[&str] = &[
    "is based in",
    "is married to",
    "is working at",
    "is learning from",
    "is saving for a trip to",
    "was promoted by",
];

/// A maintenance corpus with known contradictions and duplicates.
#[derive(Debug, Clone)]
pub struct MaintenanceFixture {
    pub corpus: Corpus,
    /// (original fact, contradicting fact)
    pub contradictions: Vec<(String, String)>,
    pub duplicates: Vec<String>,
}

pub const MAINTENANCE_SESSIONS: usize = 50;
pub const MAINTENANCE_CONTRADICTIONS: usize = 20;
pub const MAINTENANCE_DUPLICATES: usize = 30;
const BASE_SESSIONS: usize = 10;

/// Ten sessions introduce 50 facts with distinct subjects; the remaining 40
/// sessions restate 30 of them verbatim and revise the other 20 (same
/// subject and predicate, new object). Each later session also carries a
/// filler sentence that is not a fact.
pub fn maintenance(seed: u64) -> MaintenanceFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = NameGen::new();
    let total = MAINTENANCE_CONTRADICTIONS + MAINTENANCE_DUPLICATES;
    let mut base = Vec::with_capacity(total);
    let mut revised = Vec::with_capacity(total);
    for i in 0..total {
        let subject = names.next(&mut rng);
        let predicate = PREDICATES[i % PREDICATES.len()];
        let (old, new) = (names.next(&mut rng), names.next(&mut rng));
        base.push(format!("{subject} {predicate} {old}."));
        revised.push(format!("{subject} {predicate} {new}."));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let contradicted: Vec<usize> = order[..MAINTENANCE_CONTRADICTIONS].to_vec();
    let duplicated: Vec<usize> = order[MAINTENANCE_CONTRADICTIONS..].to_vec();

    let mut sessions: Vec<Vec<String>> = base
        .chunks(total / BASE_SESSIONS)
        .map(|c| c.to_vec())
        .collect();
    // 40 later sessions: 20 with one revision each, 20 holding the 30
    // restatements (ten sessions get two).
    let mut later: Vec<Vec<String>> = contradicted.iter().map(|&i| vec![revised[i].clone()]).collect();
    let mut dups = duplicated.iter().map(|&i| base[i].clone());
    for s in 0..(MAINTENANCE_SESSIONS - BASE_SESSIONS - MAINTENANCE_CONTRADICTIONS) {
        let take = if s < MAINTENANCE_DUPLICATES - 20 { 2 } else { 1 };
        later.push(dups.by_ref().take(take).collect());
    }
    later.shuffle(&mut rng);
    for facts in &mut later {
        facts.push(FILLERS.choose(&mut rng).expect("non-empty").to_string());
    }
    sessions.extend(later);

    let name = "maintenance";
    let corpus_sessions = sessions
        .into_iter()
        .enumerate()
        .map(|(i, sentences)| {
            Session::new(
                format!("{name}/m{i:02}"),
                base_date().add_days(i as i64),
                [
                    (Role::User, sentences.join(" ")),
                    (Role::Assistant, REPLIES[i % REPLIES.len()].to_string()),
                ],
            )
        })
        .collect();
    MaintenanceFixture {
        corpus: Corpus {
            name: name.into(),
            sessions: corpus_sessions,
            ..Default::default()
        },
        contradictions: contradicted.iter().map(|&i| (base[i].clone(), revised[i].clone())).collect(),
        duplicates: duplicated.iter().map(|&i| base[i].clone()).collect(),
    }
}

const DIALOGUE_TEMPLATES: &[&str] = &[
    "I met {P} at {L} yesterday.",
    "{P} told me about the trip to {L}.",
    "We visited {L} with {P} last weekend.",
    "{P} scored {K} goals in the match at {L}.",
    "I have been talking with {P} about moving to {L}.",
    "{P} and {Q} are planning a dinner in {L} next month.",
    "My internet speed is {K} Mbps since last month.",
    "{P} recommended {Q} as a guide for {L}.",
];

const SMALL_TALK: &[&str] = &["ok", "thanks", "sure!", "haha", "cool"];

/// Free-form dialogues over a small cast of recurring people and places,
/// so the same entities reappear across many sessions. Roughly one session
/// in ten is small talk with nothing worth extracting.
pub fn random_dialogues(seed: u64, sessions: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = NameGen::new();
    let people: Vec<String> = (0..40).map(|_| names.next(&mut rng)).collect();
    let places: Vec<String> = (0..25).map(|_| names.next(&mut rng)).collect();
    let name = "random";
    let out = (0..sessions)
        .map(|i| {
            let date = base_date().add_days(rng.random_range(0..365));
            let mut turns = Vec::new();
            if rng.random_bool(0.1) {
                turns.push((Role::User, SMALL_TALK.choose(&mut rng).expect("non-empty").to_string()));
            } else {
                for _ in 0..rng.random_range(1..=3) {
                    let sentences: Vec<String> = (0..rng.random_range(1..=3))
                        .map(|_| {
                            DIALOGUE_TEMPLATES
                                .choose(&mut rng)
                                .expect("non-empty")
                                .replace("{P}", people.choose(&mut rng).expect("non-empty"))
                                .replace("{Q}", people.choose(&mut rng).expect("non-empty"))
                                .replace("{L}", places.choose(&mut rng).expect("non-empty"))
                                .replace("{K}", &rng.random_range(1..1000).to_string())
                        })
                        .collect();
                    turns.push((Role::User, sentences.join(" ")));
                    turns.push((Role::Assistant, REPLIES.choose(&mut rng).expect("non-empty").to_string()));
                }
            }
            Session::new(format!("{name}/r{i:03}"), date, turns)
        })
        .collect();
    Corpus {
        name: name.into(),
        sessions: out,
        ..Default::default()
    }
}
