//! Deterministic synthetic contexts with embedded key→value facts, and the
//! recall / copy-span query pairs asked about them.
//!
//! Token layout: `0..FILLER_START` are reserved markers, everything above is
//! filler. A fact occupies `KEY_LEN + VALUE_LEN` consecutive context tokens,
//! key first.

use serde::{Deserialize, Serialize};

use crate::codec::{content_hash, Reader, Writer};
use crate::error::{Error, FileKind, Result};
use crate::oracle::QuerySample;
use crate::tensor::Prng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const QUERY: u32 = 2;
pub const ANSWER: u32 = 3;
pub const QUOTE: u32 = 4;
/// Phrasing variants; pair `j` of a task uses `TEMPLATE_BASE + j`.
pub const TEMPLATE_BASE: u32 = 5;
pub const TEMPLATES: usize = 11;
pub const FILLER_START: u32 = 16;

pub const KEY_LEN: usize = 2;
pub const VALUE_LEN: usize = 3;
pub const FACT_SPAN: usize = KEY_LEN + VALUE_LEN;
pub const MAX_RESPONSE_LEN: usize = 196;
const COPY_BASE_LEN: usize = 8;
const COPY_STEP: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: Vec<u32>,
    pub value: Vec<u32>,
    /// 1-based context position of the first key token.
    pub position: usize,
}

impl Fact {
    /// 1-based position of the first value token.
    pub fn value_position(&self) -> usize {
        self.position + self.key.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `QUERY tmpl key ANSWER` → the fact's value.
    Recall,
    /// `QUOTE tmpl key ANSWER` → the context span starting at the key.
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub instruction: Vec<u32>,
    pub response: Vec<u32>,
    pub task: TaskKind,
    pub fact: usize,
    pub split: Split,
}

impl Pair {
    /// Instruction followed by response, as fed under teacher forcing.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.instruction.clone();
        t.extend_from_slice(&self.response);
        t
    }
}

/// Relative weights of the task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskMix {
    pub recall: f64,
    pub copy: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self { recall: 5.0, copy: 1.0 }
    }
}

impl TaskMix {
    /// Splits `per_fact` pairs over the tasks by largest remainder; ties go
    /// to recall.
    pub fn allocate(&self, per_fact: usize) -> Result<[(TaskKind, usize); 2]> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        let total = self.recall + self.copy;
        if !ok(self.recall) || !ok(self.copy) || total <= 0.0 {
            return Err(Error::InvalidConfig(format!("bad task mix {self:?}")));
        }
        let shares = [self.recall / total * per_fact as f64, self.copy / total * per_fact as f64];
        let mut counts = [shares[0].floor() as usize, shares[1].floor() as usize];
        let left = per_fact - counts[0] - counts[1];
        let mut order = [0usize, 1];
        order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())));
        for &i in order.iter().take(left) {
            counts[i] += 1;
        }
        Ok([(TaskKind::Recall, counts[0]), (TaskKind::Copy, counts[1])])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub vocab: usize,
    pub context: Vec<u32>,
    /// Sorted by position.
    pub facts: Vec<Fact>,
    pub pairs: Vec<Pair>,
}

/// Filler context of length `n` with `facts` non-overlapping fact spans at
/// uniformly random placements and distinct keys.
pub fn gen_corpus(seed: u64, n: usize, facts: usize, vocab: usize) -> Result<SyntheticCorpus> {
    if vocab <= FILLER_START as usize + 1 || vocab > u32::MAX as usize {
        return Err(Error::InvalidConfig(format!("vocab {vocab} leaves no filler tokens")));
    }
    let need = facts.checked_mul(FACT_SPAN).ok_or_else(|| Error::InvalidConfig("fact count overflows".into()))?;
    if need > n {
        return Err(Error::InvalidConfig(format!("{facts} facts of width {FACT_SPAN} do not fit in {n} tokens")));
    }
    let fillers = vocab - FILLER_START as usize;
    if (fillers as u128).pow(KEY_LEN as u32) < facts as u128 {
        return Err(Error::InvalidConfig(format!("vocab {vocab} cannot give {facts} distinct keys")));
    }
    let root = Prng::new(seed);
    let mut rng = root.split(0);
    let draw = |rng: &mut Prng| FILLER_START + rng.below(fillers) as u32;
    let mut context: Vec<u32> = (0..n).map(|_| draw(&mut rng)).collect();

    // A uniform placement of k blocks of width w among n slots is a sorted
    // multiset of k offsets in [0, n − k·w], each shifted by i·w.
    let slack = n - need;
    let mut offsets: Vec<usize> = (0..facts).map(|_| rng.below(slack + 1)).collect();
    offsets.sort_unstable();

    let mut keys: Vec<Vec<u32>> = Vec::with_capacity(facts);
    while keys.len() < facts {
        let k: Vec<u32> = (0..KEY_LEN).map(|_| draw(&mut rng)).collect();
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let facts: Vec<Fact> = offsets
        .into_iter()
        .zip(keys)
        .enumerate()
        .map(|(i, (off, key))| {
            let start = off + i * FACT_SPAN;
            let value: Vec<u32> = (0..VALUE_LEN).map(|_| draw(&mut rng)).collect();
            context[start..start + KEY_LEN].copy_from_slice(&key);
            context[start + KEY_LEN..start + FACT_SPAN].copy_from_slice(&value);
            Fact { key, value, position: start + 1 }
        })
        .collect();
    Ok(SyntheticCorpus { seed, vocab, context, facts, pairs: Vec::new() })
}

/// `per_fact` pairs per fact, divided over task kinds by `mix`, then split
/// 80/20 into train/test by a seeded shuffle.
pub fn gen_pairs(corpus: &SyntheticCorpus, per_fact: usize, mix: &TaskMix) -> Result<Vec<Pair>> {
    if corpus.facts.is_empty() {
        return Err(Error::Empty("fact table"));
    }
    let alloc = mix.allocate(per_fact)?;
    if let Some((task, c)) = alloc.iter().find(|(_, c)| *c > TEMPLATES) {
        return Err(Error::InvalidConfig(format!("{c} {task:?} pairs per fact exceed {TEMPLATES} templates")));
    }
    let n = corpus.context.len();
    let mut pairs = Vec::with_capacity(corpus.facts.len() * per_fact);
    for (fi, fact) in corpus.facts.iter().enumerate() {
        for &(task, count) in &alloc {
            for j in 0..count {
                let lead = match task {
                    TaskKind::Recall => QUERY,
                    TaskKind::Copy => QUOTE,
                };
                let mut instruction = vec![lead, TEMPLATE_BASE + j as u32];
                instruction.extend_from_slice(&fact.key);
                instruction.push(ANSWER);
                let response = match task {
                    TaskKind::Recall => fact.value.clone(),
                    TaskKind::Copy => {
                        let start = fact.position - 1;
                        let len = (COPY_BASE_LEN + COPY_STEP * j).min(MAX_RESPONSE_LEN).min(n - start);
                        corpus.context[start..start + len].to_vec()
                    }
                };
                pairs.push(Pair { instruction, response, task, fact: fi, split: Split::Train });
            }
        }
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    Prng::new(corpus.seed).split(1).shuffle(&mut order);
    let train = pairs.len() * 4 / 5;
    for &i in &order[train..] {
        pairs[i].split = Split::Test;
    }
    Ok(pairs)
}

impl SyntheticCorpus {
    pub fn with_pairs(mut self, per_fact: usize, mix: &TaskMix) -> Result<Self> {
        self.pairs = gen_pairs(&self, per_fact, mix)?;
        Ok(self)
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Teacher-forcing sequences of one split, ids = pair indices.
    pub fn query_samples(&self, split: Split) -> Vec<QuerySample> {
        self.pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.split == split)
            .map(|(i, p)| QuerySample { id: i as u32, tokens: p.tokens() })
            .collect()
    }

    /// Checks that every fact sits where recorded and every pair's response
    /// is read off the context.
    pub fn audit(&self) -> Result<()> {
        let n = self.context.len();
        let bad = |msg: String| Err(Error::Invariant(msg));
        if let Some(&t) = self.context.iter().find(|&&t| t as usize >= self.vocab) {
            return bad(format!("context token {t} outside vocabulary {}", self.vocab));
        }
        let mut end = 0;
        for (i, f) in self.facts.iter().enumerate() {
            let start = f.position.wrapping_sub(1);
            let span = f.key.len() + f.value.len();
            if f.position == 0 || start < end || start + span > n {
                return bad(format!("fact {i} at position {} overlaps or leaves the context", f.position));
            }
            if self.context[start..start + f.key.len()] != f.key[..] || self.context[start + f.key.len()..start + span] != f.value[..] {
                return bad(format!("fact {i} does not match the context at position {}", f.position));
            }
            end = start + span;
        }
        for (i, p) in self.pairs.iter().enumerate() {
            let f = self.facts.get(p.fact).ok_or_else(|| Error::Invariant(format!("pair {i} names missing fact {}", p.fact)))?;
            if p.response.is_empty() || p.response.len() > MAX_RESPONSE_LEN {
                return bad(format!("pair {i} response length {}", p.response.len()));
            }
            let start = match p.task {
                TaskKind::Recall => f.value_position() - 1,
                TaskKind::Copy => f.position - 1,
            };
            if self.context.get(start..start + p.response.len()) != Some(&p.response[..]) {
                return bad(format!("pair {i} response is not the context span at {}", start + 1));
            }
            if p.instruction.iter().any(|&t| t as usize >= self.vocab) {
                return bad(format!("pair {i} instruction outside vocabulary"));
            }
        }
        Ok(())
    }

    /// Hash identifying this corpus; embedded in its file and usable as a
    /// producer key by downstream artifacts.
    pub fn content_hash(&self) -> u64 {
        let body = self.encode_body();
        content_hash(&[b"corpus", &body])
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.seed);
        w.u64(self.vocab as u64);
        w.u64(self.context.len() as u64);
        w.u32s(&self.context);
        w.u64(self.facts.len() as u64);
        for f in &self.facts {
            w.u64(f.position as u64);
            w.u32(f.key.len() as u32);
            w.u32s(&f.key);
            w.u32(f.value.len() as u32);
            w.u32s(&f.value);
        }
        w.u64(self.pairs.len() as u64);
        for p in &self.pairs {
            w.u8(match p.task {
                TaskKind::Recall => 0,
                TaskKind::Copy => 1,
            });
            w.u8(match p.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            w.u64(p.fact as u64);
            w.u32(p.instruction.len() as u32);
            w.u32s(&p.instruction);
            w.u32(p.response.len() as u32);
            w.u32s(&p.response);
        }
        w.finish()
    }

    /// `magic, version, content hash, body`; all integers little-endian,
    /// token arrays length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.encode_body();
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(CORPUS_VERSION);
        w.u64(content_hash(&[b"corpus", &body]));
        w.bytes(&body);
        w.finish()
    }

    /// Decodes and audits a corpus file.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(FileKind::Corpus, bytes);
        r.magic(CORPUS_MAGIC)?;
        r.version(CORPUS_VERSION)?;
        let stored = r.u64()?;
        let body_start = bytes.len() - r.remaining();
        let found = content_hash(&[b"corpus", &bytes[body_start..]]);
        if found != stored {
            return Err(Error::HashMismatch { kind: FileKind::Corpus, expected: stored, found });
        }
        let seed = r.u64()?;
        let vocab = r.count()?;
        let n = r.count()?;
        let context = r.u32s(n)?;
        let nf = r.count()?;
        let mut facts = Vec::new();
        for _ in 0..nf {
            let position = r.count()?;
            let kl = r.u32_count()?;
            let key = r.u32s(kl)?;
            let vl = r.u32_count()?;
            let value = r.u32s(vl)?;
            facts.push(Fact { key, value, position });
        }
        let np = r.count()?;
        let mut pairs = Vec::new();
        for _ in 0..np {
            let task = match r.u8()? {
                0 => TaskKind::Recall,
                1 => TaskKind::Copy,
                t => return Err(r.malformed(format!("unknown task tag {t}"))),
            };
            let split = match r.u8()? {
                0 => Split::Train,
                1 => Split::Test,
                t => return Err(r.malformed(format!("unknown split tag {t}"))),
            };
            let fact = r.count()?;
            let il = r.u32_count()?;
            let instruction = r.u32s(il)?;
            let rl = r.u32_count()?;
            let response = r.u32s(rl)?;
            pairs.push(Pair { instruction, response, task, fact, split });
        }
        r.expect_end()?;
        let corpus = Self { seed, vocab, context, facts, pairs };
        corpus.audit().map_err(|e| Error::Malformed { kind: FileKind::Corpus, msg: e.to_string() })?;
        Ok(corpus)
    }
}

const CORPUS_MAGIC: &[u8; 8] = b"KVSCORP\0";
const CORPUS_VERSION: u32 = 1;
