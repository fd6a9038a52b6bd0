#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use dialmem_core::backend::embed::{Embedder, HashEmbedder};
use dialmem_core::backend::Gateway;
use dialmem_core::engine::{build, BuildOptions, Memory};
use dialmem_core::eval::loader::Corpus;
use dialmem_core::model::PipelineConfig;

pub const DIM: usize = 256;

pub fn mock_build(corpus: &Corpus, config: &PipelineConfig) -> (Memory, Gateway) {
    let gateway = Gateway::mock(DIM);
    let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(DIM));
    let (memory, _) = build(corpus, config, &gateway, embedder, BuildOptions::default()).expect("build");
    (memory, gateway)
}

/// Relative path → file bytes for every file under `dir`.
pub fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Writes a pipeline config file, with an optional `[backend]` table.
pub fn write_config(path: &Path, config: &PipelineConfig, backend: Option<&str>) {
    let mut raw = config.to_toml_string();
    if let Some(b) = backend {
        raw.push_str("\n[backend]\n");
        raw.push_str(b);
        raw.push('\n');
    }
    fs::write(path, raw).expect("write config");
}

pub fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["dialmem"];
    argv.extend_from_slice(args);
    dialmem_core::cli::run_from(argv)
}
