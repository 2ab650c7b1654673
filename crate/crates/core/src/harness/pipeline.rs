use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, FileKind, Result};
use crate::eval::{agreement, bench, reports_csv, rte, BenchPoint, EvalReport};
use crate::model::ModelWeights;
use crate::oracle::{cache_targets, TargetCache};
use crate::surrogate::{init_surrogate_stack, plan_capacity, SurrogateStack};
use crate::taskgen::{gen_corpus, Split, SyntheticCorpus};
use crate::train::{train, LossWeights, TrainOutcome};

/// A run directory: `config.toml`, `checkpoints/`, `caches/`, `reports/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    cfg: RunConfig,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

impl RunDir {
    /// Creates (or reuses) the directory for `cfg` and writes its config.
    /// An existing directory must hold the same config.
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        Self::create_at(cfg.run_dir(), cfg)
    }

    pub fn create_at(root: impl Into<PathBuf>, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = root.into();
        let text = cfg.to_toml()?;
        let cfg_path = root.join("config.toml");
        if cfg_path.exists() {
            let existing = RunConfig::from_toml(&String::from_utf8_lossy(&read(&cfg_path)?))?;
            if existing != *cfg {
                return Err(Error::HashMismatch {
                    kind: FileKind::RunConfig,
                    expected: cfg.config_hash()?,
                    found: existing.config_hash()?,
                });
            }
        }
        for sub in ["checkpoints", "caches", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        write(&cfg_path, text)?;
        Ok(Self { root, cfg: cfg.clone() })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let text = read(&root.join("config.toml"))?;
        let cfg = RunConfig::from_toml(&String::from_utf8_lossy(&text))?;
        Ok(Self { root, cfg })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn targets_rel(split: Split) -> &'static str {
        match split {
            Split::Train => "caches/targets-train.bin",
            Split::Test => "caches/targets-test.bin",
        }
    }

    fn expected_corpus(&self) -> Result<SyntheticCorpus> {
        let c = &self.cfg.corpus;
        gen_corpus(c.seed, c.context_len, c.facts, self.cfg.model.vocab)?.with_pairs(c.pairs_per_fact, &c.mix)
    }

    /// Builds the frozen model and the synthetic corpus.
    pub fn gen_data(&self) -> Result<(ModelWeights, SyntheticCorpus)> {
        let weights = ModelWeights::init(&self.cfg.model)?;
        let corpus = self.expected_corpus()?;
        write(&self.path("checkpoints/model.bin"), weights.to_bytes())?;
        write(&self.path("caches/corpus.bin"), corpus.to_bytes())?;
        Ok((weights, corpus))
    }

    pub fn load_model(&self) -> Result<ModelWeights> {
        let w = ModelWeights::from_bytes(&read(&self.path("checkpoints/model.bin"))?)?;
        let expected = self.cfg.model.config_hash();
        let found = w.config().config_hash();
        if expected != found {
            return Err(Error::HashMismatch { kind: FileKind::ModelCheckpoint, expected, found });
        }
        Ok(w)
    }

    pub fn load_corpus(&self) -> Result<SyntheticCorpus> {
        let c = SyntheticCorpus::from_bytes(&read(&self.path("caches/corpus.bin"))?)?;
        let expected = self.expected_corpus()?.content_hash();
        let found = c.content_hash();
        if expected != found {
            return Err(Error::HashMismatch { kind: FileKind::Corpus, expected, found });
        }
        Ok(c)
    }

    /// Prefills the context once and caches targets for both splits.
    pub fn cache_targets(&self) -> Result<(TargetCache, TargetCache)> {
        let weights = self.load_model()?;
        let corpus = self.load_corpus()?;
        let prefill = weights.prefill(&corpus.context)?;
        let model_hash = Some(weights.weights_hash());
        let mut out = Vec::with_capacity(2);
        for split in [Split::Train, Split::Test] {
            let cache = cache_targets(&weights, &corpus.context, &prefill.cache, &corpus.query_samples(split), model_hash)?;
            write(&self.path(Self::targets_rel(split)), cache.to_bytes())?;
            out.push(cache);
        }
        let test = out.pop().expect("two splits");
        let train = out.pop().expect("two splits");
        Ok((train, test))
    }

    pub fn load_targets(&self, split: Split, weights: &ModelWeights, corpus: &SyntheticCorpus) -> Result<TargetCache> {
        TargetCache::from_bytes_for(&read(&self.path(Self::targets_rel(split)))?, weights, &corpus.context)
    }

    /// Initializes the configured surrogate and trains it on the train split.
    pub fn train(&self) -> Result<TrainOutcome> {
        let weights = self.load_model()?;
        let corpus = self.load_corpus()?;
        let cache = self.load_targets(Split::Train, &weights, &corpus)?;
        let cfg = weights.config();
        let s = &self.cfg.surrogate;
        let plan = plan_capacity(s.rho, corpus.context.len(), cfg.head_dim, cfg.layers, &s.groups(cfg.layers))?;
        let prefill = weights.prefill(&corpus.context)?;
        let stack = init_surrogate_stack(s.family, &plan, cfg, &prefill.cache, cache.header.key_hash, s.seed)?;
        let outcome = train(&weights, stack, &cache, &self.cfg.train, |step, st| {
            write(&self.path(&format!("checkpoints/surrogate-step{step:06}.bin")), st.to_bytes())
        })?;
        write(&self.path("checkpoints/surrogate.bin"), outcome.stack.to_bytes())?;
        write(&self.path("reports/metrics.csv"), outcome.log.to_csv())?;
        write(&self.path("reports/wallclock.csv"), outcome.log.wallclock_csv())?;
        let hyper = serde_json::to_string_pretty(&outcome.hyper).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write(&self.path("reports/hyper.json"), hyper)?;
        Ok(outcome)
    }

    pub fn load_surrogate(&self, key_hash: u64) -> Result<SurrogateStack> {
        let stack = SurrogateStack::from_bytes(&read(&self.path("checkpoints/surrogate.bin"))?)?;
        stack.check_key(key_hash)?;
        if stack.plan().rho != self.cfg.surrogate.rho || *stack.family() != self.cfg.surrogate.family {
            return Err(Error::InvalidConfig("surrogate checkpoint was trained under a different capacity or family".into()));
        }
        Ok(stack)
    }

    /// Agreement and RTE on the test split.
    pub fn eval(&self) -> Result<EvalReport> {
        let weights = self.load_model()?;
        let corpus = self.load_corpus()?;
        let cache = self.load_targets(Split::Test, &weights, &corpus)?;
        let stack = self.load_surrogate(cache.header.key_hash)?;
        let samples: Vec<usize> = (0..cache.samples.len()).collect();
        let agreement = agreement(&weights, &stack, &cache, &samples, self.cfg.eval.labels)?;
        let rte = rte(&stack, &cache, &cache.positions())?;
        let loss = self.cfg.train.loss;
        let report = EvalReport {
            label: self.cfg.name.clone(),
            family: stack.family().name().into(),
            rho: self.cfg.surrogate.rho,
            lambda_alpha: loss.lambda_alpha,
            lambda_a: loss.lambda_a,
            lambda_kl: loss.lambda_kl,
            surrogate_params: stack.total_params(),
            agreement,
            rte,
            bench: Vec::new(),
        };
        self.write_report(&report)?;
        Ok(report)
    }

    fn write_report(&self, report: &EvalReport) -> Result<()> {
        write(&self.path("reports/eval.json"), report.to_json()?)?;
        write(&self.path("reports/eval.csv"), reports_csv(std::slice::from_ref(report)))?;
        write(&self.path("reports/heatmap.csv"), report.heatmap_csv())
    }

    /// Decode benchmark of the trained surrogate against full attention.
    pub fn bench(&self, sizes: Option<&[usize]>) -> Result<Vec<BenchPoint>> {
        let weights = self.load_model()?;
        let corpus = self.load_corpus()?;
        let key = crate::oracle::context_key(&weights, &corpus.context);
        let stack = self.load_surrogate(key)?;
        let sizes = sizes.unwrap_or(&self.cfg.eval.bench_sizes);
        let points = bench(&weights, &stack, sizes, &self.cfg.eval.bench)?;
        let mut s = String::from("context_len,full_ttft_ms,full_step_ms,full_tokens_per_s,surrogate_ttft_ms,surrogate_step_ms,surrogate_tokens_per_s,full_memory_bytes,surrogate_memory_bytes\n");
        for p in &points {
            let ttft = p.full_ttft_ms.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{ttft},{},{},{},{},{},{},{}",
                p.context_len, p.full_step_ms, p.full_tokens_per_s, p.surrogate_ttft_ms, p.surrogate_step_ms, p.surrogate_tokens_per_s, p.full_memory_bytes, p.surrogate_memory_bytes
            );
        }
        write(&self.path("reports/bench.csv"), s)?;
        Ok(points)
    }

    /// gen-data → cache-targets → train → eval.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.gen_data()?;
        self.cache_targets()?;
        self.train()?;
        self.eval()
    }
}

/// Short tag for a loss triple, e.g. `a0.1-A1-kl0`.
pub fn loss_label(l: &LossWeights) -> String {
    format!("a{}-A{}-kl{}", l.lambda_alpha, l.lambda_a, l.lambda_kl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub rhos: Vec<f64>,
    pub losses: Vec<LossWeights>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            rhos: vec![0.005, 0.02],
            losses: vec![LossWeights::REGRESSION, LossWeights::REGRESSION_DISTILL, LossWeights::DISTILL],
        }
    }
}

/// Runs every (ρ, loss) grid point of `base` in its own directory under
/// `root` and writes the joined report rows to `root/sweep.csv`.
pub fn sweep(base: &RunConfig, grid: &SweepGrid, root: &Path) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(grid.rhos.len() * grid.losses.len());
    for &rho in &grid.rhos {
        for loss in &grid.losses {
            let mut cfg = base.clone().with_loss(*loss);
            cfg.surrogate.rho = rho;
            cfg.name = format!("{}-rho{rho}-{}", base.name, loss_label(loss));
            cfg.output_dir = None;
            let dir = RunDir::create_at(root.join(&cfg.name), &cfg)?;
            reports.push(dir.run_all()?);
        }
    }
    fs::create_dir_all(root)?;
    write(&root.join("sweep.csv"), reports_csv(&reports))?;
    Ok(reports)
}
