#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use streamsense::eval::Task;
use streamsense::harness::LoadedSuite;
use streamsense::types::{FieldValue, Fields};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn suite() -> LoadedSuite {
    LoadedSuite::load(&fixtures().join("suite")).expect("bundled suite loads")
}

pub fn task(id: &str) -> Task {
    suite().tasks.into_iter().find(|t| t.task_id == id).expect("task exists")
}

#[derive(Debug, Deserialize)]
pub struct Expect {
    pub stage: String,
    pub node_id: String,
    pub code: String,
}

#[derive(Debug, Deserialize)]
pub struct Corrupted {
    pub name: String,
    pub task: String,
    pub program: serde_json::Value,
    pub expect: Expect,
}

impl Corrupted {
    pub fn task(&self) -> Task {
        Task::from_file(&fixtures().join("corrupted").join(&self.task)).expect("fixture task loads")
    }

    pub fn document(&self) -> String {
        serde_json::to_string_pretty(&self.program).unwrap()
    }
}

pub fn corrupted() -> Vec<Corrupted> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(fixtures().join("corrupted"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()).collect()
}

/// Maximum total similarity over all monotone one-to-one alignments, by
/// enumerating every pair of equal-size index subsets.
pub fn brute_force_alignment(m: usize, n: usize, sim: impl Fn(usize, usize) -> f64) -> f64 {
    let mut best = 0.0f64;
    for sa in 0u32..(1 << m) {
        let a: Vec<usize> = (0..m).filter(|i| sa & (1 << i) != 0).collect();
        for sb in 0u32..(1 << n) {
            if sb.count_ones() as usize != a.len() {
                continue;
            }
            let b: Vec<usize> = (0..n).filter(|j| sb & (1 << j) != 0).collect();
            let total: f64 = a.iter().zip(&b).map(|(&i, &j)| sim(i, j)).sum();
            best = best.max(total);
        }
    }
    best
}

const WORDS: [&str; 8] = ["red", "green", "walk", "run", "the", "park", "cat", "dog"];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..5);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_fields(rng: &mut ChaCha8Rng) -> Fields {
    let mut f = Fields::new();
    for key in ["a", "b", "c"] {
        if rng.gen_bool(0.7) {
            let v = if rng.gen_bool(0.3) { FieldValue::Number(rng.gen_range(0..4) as f64) } else { FieldValue::Text(random_text(rng)) };
            f.insert(key.to_string(), v);
        }
    }
    f
}

pub fn random_items(rng: &mut ChaCha8Rng, max: usize) -> Vec<Fields> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| random_fields(rng)).collect()
}
