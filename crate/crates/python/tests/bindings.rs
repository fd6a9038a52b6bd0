//! Drives the bindings through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn run(code: &str) {
    Python::with_gil(|py| {
        let m = PyModule::new(py, "dialmem").unwrap();
        dialmem::register(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("dialmem", m).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn build_retrieve_and_evaluate() {
    run(r#"
corpus = dialmem.Corpus.synthetic("benchmark", seed=3)
assert len(corpus) == 100
for cfg in (dialmem.Config(), dialmem.Config.desc_graph()):
    mem = dialmem.Memory.build(corpus, cfg, dimension=128)
    q = corpus.questions()[0]
    hits = mem.retrieve(q["question_text"], n=5)
    assert 0 < len(hits) <= 5
    report = mem.evaluate(corpus, answer=True)
    assert report["aggregates"]["questions"] == 20
    assert 0.0 <= report["aggregates"]["recall_at_5"] <= 1.0
"#);
}

#[test]
fn config_round_trip_and_errors() {
    run(r#"
cfg = dialmem.Config('key_strategy = "separate_sfk"\nvalue_kind = "key"\n')
assert dialmem.Config(cfg.to_toml()).to_dict() == cfg.to_dict()
try:
    dialmem.Config('k_keys = 2\nn_values = 5\n')
    raise AssertionError("invalid config accepted")
except ValueError:
    pass
"#);
}

#[test]
fn save_load_and_helpers() {
    let dir = tempfile::tempdir().unwrap();
    run(&format!(
        r#"
path = {path:?}
corpus = dialmem.Corpus.synthetic("random", seed=1, sessions=30)
mem = dialmem.Memory.build(corpus, dialmem.Config.desc_graph())
mem.save(path)
again = dialmem.Memory.load(path)
assert again.counts() == mem.counts()
assert again.retrieve("Lisbon") == mem.retrieve("Lisbon")
report = dialmem.parse_extraction('("entity"<|>Ann<|>Person<|>a friend)##<|COMPLETE|>')
assert report["entities"][0]["name"] == "ANN"
assert dialmem.recall_at_k(["a", "b"], {{"b", "c"}}, 2) == 0.5
assert abs(dialmem.ndcg_at_k(["x", "a"], {{"a"}}, 2) - 0.6309297535714575) < 1e-12
"#,
        path = dir.path().join("idx").to_string_lossy()
    ));
}
