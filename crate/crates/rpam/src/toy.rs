//! Hand-built copy / reverse specialists and their task data.
//!
//! Prompts are `[marker, p_1 .. p_n, SEP]` over `S` payload symbols; the
//! answer is the payload copied (marker `COPY`) or reversed (marker `REV`).
//! Both specialists share one two-block circuit:
//!
//! * block 0 attention broadcasts the marker from position 0 to every
//!   position;
//! * block 0 MLP writes, at each answer position, a one-hot "source
//!   position" the answer should be read from;
//! * block 1 attention reads the payload token at that source position into
//!   an output subspace, which the unembedding maps to logits.
//!
//! The long specialist's block-0 MLP routes on the marker (copy or reverse
//! source); the short specialist's always points at the reverse source.
//! The long specialist's block-1 MLP additionally outbids the read-out at
//! answer positions whenever the reverse marker is present. So long solves
//! copy only, short solves reverse only, and the merge that takes block 0
//! from long and block 1 from short solves both, while uniform averaging
//! solves neither.
//!
//! The residual stream is laid out in named subspaces. Every writer keeps
//! the per-position sum at zero through a balance coordinate, so each layer
//! norm only rescales, and its gain is set to undo the scale expected at
//! answer positions.

use std::collections::{BTreeMap, HashSet};

use rpam_core::labeling::ResponseRecord;
use rpam_core::model::{
    block_tensor_name, ModelError, FINAL_NORM_WEIGHT, POS_EMBED, TOK_EMBED, UNEMBED,
};
use rpam_core::rng;
use rpam_core::{Checkpoint, ModelConfig, ModelTag, Tensor, TokenId, ToyModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::EvalRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub payload_len: usize,
    pub symbols: usize,
    /// Half-width of the uniform noise added to every weight.
    pub noise: f64,
    pub calibration_queries: usize,
    pub eval_per_task: usize,
    pub k: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            payload_len: 4,
            symbols: 6,
            noise: 0.01,
            calibration_queries: 128,
            eval_per_task: 100,
            k: 12,
        }
    }
}

/// Contrastive weight for calibrating on this fixture.
///
/// The alignment term grows with the square of the feature scale while the
/// contrastive term is bounded, so the weight has to follow the features.
/// Toy residual streams carry a few units per position; 1000 (sized for
/// billion-parameter hidden states) would leave alignment with no say.
pub const CALIBRATION_OMEGA: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy spec: {0}")]
    Spec(String),
    #[error("model config incompatible with the toy layout: {0}")]
    Config(String),
    #[error("seed {seed}: {model} specialist scored {accuracy:.3} on {task} (needs {bound})")]
    Threshold {
        seed: u64,
        model: ModelTag,
        task: Task,
        accuracy: f64,
        bound: &'static str,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
        })
    }
}

impl Task {
    /// The specialist expected to solve this task.
    pub fn specialist(self) -> ModelTag {
        match self {
            Task::Copy => ModelTag::Long,
            Task::Reverse => ModelTag::Short,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyQuery {
    pub query_id: String,
    pub split: Split,
    pub task: Task,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// Token ids and residual-stream coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub symbols: usize,
    pub max_seq: usize,
    pub vocab: usize,
    pub tok: usize,
    pub pos: usize,
    pub mark: usize,
    pub tgt: usize,
    pub out: usize,
    pub bal: usize,
    pub min_d_model: usize,
    pub min_d_ff: usize,
}

impl Layout {
    pub fn new(spec: &ToySpec) -> Self {
        let n = spec.payload_len;
        let s = spec.symbols;
        let vocab = s + 3;
        let max_seq = 2 * n + 2;
        let tok = 0;
        let pos = tok + vocab;
        let mark = pos + max_seq;
        let tgt = mark + 2;
        let out = tgt + n;
        let bal = out + s;
        Self {
            n,
            symbols: s,
            max_seq,
            vocab,
            tok,
            pos,
            mark,
            tgt,
            out,
            bal,
            min_d_model: bal + 1,
            min_d_ff: 3 * n,
        }
    }

    pub fn marker(&self, task: Task) -> TokenId {
        (self.symbols + task as usize) as TokenId
    }

    pub fn sep(&self) -> TokenId {
        (self.symbols + 2) as TokenId
    }

    pub fn default_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab,
            d_model: self.min_d_model,
            n_layers: 2,
            n_heads: 1,
            d_ff: self.min_d_ff,
            max_seq: self.max_seq,
        }
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<(), ToyError> {
        cfg.validate()?;
        let bad = |m: String| Err(ToyError::Config(m));
        if cfg.vocab_size != self.vocab {
            return bad(format!("vocab_size must be {}", self.vocab));
        }
        if cfg.max_seq != self.max_seq {
            return bad(format!("max_seq must be {}", self.max_seq));
        }
        if cfg.n_layers != 2 || cfg.n_heads != 1 {
            return bad("needs n_layers = 2 and n_heads = 1".into());
        }
        if cfg.d_model < self.min_d_model || cfg.d_ff < self.min_d_ff {
            return bad(format!(
                "needs d_model >= {} and d_ff >= {}",
                self.min_d_model, self.min_d_ff
            ));
        }
        Ok(())
    }

    /// Source position the answer at query position `t` reads from.
    fn source(&self, task: Task, t: usize) -> usize {
        match task {
            Task::Copy => t - self.n,
            Task::Reverse => 2 * self.n + 1 - t,
        }
    }

    /// Answer positions: the SEP position and the positions of the first
    /// `n - 1` generated tokens.
    fn query_positions(&self) -> std::ops::RangeInclusive<usize> {
        self.n + 1..=2 * self.n
    }
}

pub fn prompt_for(layout: &Layout, task: Task, payload: &[TokenId]) -> Vec<TokenId> {
    let mut p = Vec::with_capacity(payload.len() + 2);
    p.push(layout.marker(task));
    p.extend_from_slice(payload);
    p.push(layout.sep());
    p
}

pub fn target_for(task: Task, payload: &[TokenId]) -> Vec<TokenId> {
    match task {
        Task::Copy => payload.to_vec(),
        Task::Reverse => payload.iter().rev().copied().collect(),
    }
}

// Circuit constants. Attention logits reach ~30 nats at full strength;
// MLP units see pre-activations of ±5.
const ATTN0_SHARPNESS: f64 = 30.0;
const ATTN1_SHARPNESS: f64 = 25.0;
const UNIT_GAIN: f64 = 10.0;
const CORRUPT_WRITE: f64 = 8.0;
const LOGIT_SCALE: f64 = 4.0;

fn gelu(x: f64) -> f64 {
    rpam_core::model::gelu(x)
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ModelConfig) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.canonical_tensors() {
            let numel = shape.numel();
            tensors.insert(name, (shape.0, vec![0.0; numel]));
        }
        Self { cfg, tensors }
    }

    fn set(&mut self, name: &str, idx: &[usize], v: f64) {
        let (shape, data) = self.tensors.get_mut(name).expect("canonical tensor");
        let flat = match idx {
            [i] => *i,
            [i, j] => i * shape[1] + j,
            _ => unreachable!(),
        };
        data[flat] = v;
    }

    fn block(&mut self, l: usize, suffix: &str, idx: &[usize], v: f64) {
        self.set(&block_tensor_name(l, suffix), idx, v);
    }

    fn fill_norm(&mut self, weight: &str, sigma: f64) {
        for j in 0..self.cfg.d_model {
            self.set(weight, &[j], sigma);
        }
    }

    fn finish(self, noise: f64, seed: u64, stream: u64) -> Checkpoint {
        let mut out = Checkpoint::new();
        for (name, (shape, data)) in self.tensors {
            let key = rng::fnv1a(name.as_bytes()) ^ stream;
            let t = Tensor::from_fn(shape, |i| {
                let u = rng::counter_unit(seed, key, i as u64);
                (data[i] + noise * (2.0 * u - 1.0)) as f32
            });
            out.insert(name, t);
        }
        out
    }
}

/// Layer-norm scale of a zero-mean position whose squared entries sum to
/// `units`.
fn design_sigma(units: f64, d_model: usize) -> f64 {
    (units / d_model as f64 + rpam_core::model::LN_EPS).sqrt()
}

/// Build one specialist. `long` selects the marker-routed block-0 MLP and
/// the reverse-marker corrupter in block 1.
pub fn build_specialist(
    spec: &ToySpec,
    cfg: &ModelConfig,
    long: bool,
    seed: u64,
) -> Result<Checkpoint, ToyError> {
    let l = Layout::new(spec);
    l.check_config(cfg)?;
    let d = cfg.d_model;
    let sqrt_d = (d as f64).sqrt();
    let mut b = Builder::new(cfg);

    // Embeddings: token one-hot and position one-hot, each paying one unit
    // into the balance coordinate.
    for y in 0..l.vocab {
        b.set(TOK_EMBED, &[y, l.tok + y], 1.0);
        b.set(TOK_EMBED, &[y, l.bal], -1.0);
    }
    for p in 0..l.max_seq {
        b.set(POS_EMBED, &[p, l.pos + p], 1.0);
        b.set(POS_EMBED, &[p, l.bal], -1.0);
    }

    // Squared-entry sums at each norm (answer positions): the embeddings
    // give 1 + 1 + 2²; each later write adds a unit and deepens the balance.
    let sigma = |units: f64| design_sigma(units, d);
    b.fill_norm(&block_tensor_name(0, "ln1.weight"), sigma(6.0));
    b.fill_norm(&block_tensor_name(0, "ln2.weight"), sigma(12.0));
    b.fill_norm(&block_tensor_name(1, "ln1.weight"), sigma(20.0));
    b.fill_norm(&block_tensor_name(1, "ln2.weight"), sigma(30.0));
    b.fill_norm(FINAL_NORM_WEIGHT, sigma(30.0));

    // Block 0 attention: every query attends to position 0 and copies the
    // marker identity into MARK.
    b.block(0, "attn.q.bias", &[0], 1.0);
    b.block(0, "attn.k.weight", &[l.pos, 0], ATTN0_SHARPNESS * sqrt_d);
    for (i, task) in [Task::Copy, Task::Reverse].into_iter().enumerate() {
        b.block(0, "attn.v.weight", &[l.tok + l.marker(task) as usize, i], 1.0);
        b.block(0, "attn.o.weight", &[i, l.mark + i], 1.0);
    }
    b.block(0, "attn.o.bias", &[l.bal], -1.0);

    // Block 0 MLP: write the source position of each answer position.
    let unit_out = 1.0 / gelu(0.5 * UNIT_GAIN);
    let fc1 = "mlp.fc1.weight";
    let fc2 = "mlp.fc2.weight";
    for (ti, t) in l.query_positions().enumerate() {
        if long {
            for (xi, task) in [Task::Copy, Task::Reverse].into_iter().enumerate() {
                let j = 2 * ti + xi;
                b.block(0, fc1, &[l.pos + t, j], UNIT_GAIN);
                b.block(0, fc1, &[l.mark + xi, j], UNIT_GAIN);
                b.block(0, "mlp.fc1.bias", &[j], -1.5 * UNIT_GAIN);
                b.block(0, fc2, &[j, l.tgt + l.source(task, t) - 1], unit_out);
                b.block(0, fc2, &[j, l.bal], -unit_out);
            }
        } else {
            let j = 2 * l.n + ti;
            b.block(0, fc1, &[l.pos + t, j], UNIT_GAIN);
            b.block(0, "mlp.fc1.bias", &[j], -0.5 * UNIT_GAIN);
            b.block(0, fc2, &[j, l.tgt + l.source(Task::Reverse, t) - 1], unit_out);
            b.block(0, fc2, &[j, l.bal], -unit_out);
        }
    }

    // Block 1 attention: the source one-hot selects a payload position whose
    // token is copied into OUT.
    for s in 1..=l.n {
        b.block(1, "attn.q.weight", &[l.tgt + s - 1, s - 1], ATTN1_SHARPNESS * sqrt_d);
        b.block(1, "attn.k.weight", &[l.pos + s, s - 1], 1.0);
    }
    for y in 0..l.symbols {
        b.block(1, "attn.v.weight", &[l.tok + y, y], 1.0);
        b.block(1, "attn.o.weight", &[y, l.out + y], 1.0);
    }
    b.block(1, "attn.o.bias", &[l.bal], -1.0);

    // Block 1 MLP (long only): at answer positions the reverse marker
    // outbids the read-out token with OUT_0.
    if long {
        for (j, t) in l.query_positions().enumerate() {
            b.block(1, fc1, &[l.pos + t, j], UNIT_GAIN);
            b.block(1, fc1, &[l.mark + 1, j], UNIT_GAIN);
            b.block(1, "mlp.fc1.bias", &[j], -1.5 * UNIT_GAIN);
            b.block(1, fc2, &[j, l.out], CORRUPT_WRITE * unit_out);
        }
    }

    for y in 0..l.symbols {
        b.set(UNEMBED, &[l.out + y, y], LOGIT_SCALE);
    }

    let stream = if long { 0x4c4f_4e47 } else { 0x5348_5254 };
    Ok(b.finish(spec.noise, seed, stream))
}

fn check_spec(spec: &ToySpec) -> Result<(), ToyError> {
    let bad = |m: &str| Err(ToyError::Spec(m.into()));
    if spec.payload_len < 2 {
        return bad("payload_len must be at least 2");
    }
    if spec.symbols < 2 {
        return bad("symbols must be at least 2");
    }
    if spec.k == 0 {
        return bad("k must be positive");
    }
    if spec.calibration_queries == 0 || spec.eval_per_task == 0 {
        return bad("query counts must be positive");
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return bad("noise must be finite and non-negative");
    }
    let distinct = (spec.symbols as f64).powi(spec.payload_len as i32);
    let palindromes = (spec.symbols as f64).powi(spec.payload_len.div_ceil(2) as i32);
    let needed = (spec.calibration_queries + 2 * spec.eval_per_task) as f64;
    if needed > (distinct - palindromes) {
        return bad("not enough distinct non-palindromic payloads for the requested query counts");
    }
    Ok(())
}

/// Distinct (task, payload) queries: calibration queries alternate copy and
/// reverse; eval queries are disjoint from them, `eval_per_task` per task.
pub fn sample_queries(spec: &ToySpec, seed: u64) -> Result<Vec<ToyQuery>, ToyError> {
    check_spec(spec)?;
    let l = Layout::new(spec);
    let stream = rng::fnv1a(b"toy-queries");
    let mut counter = 0u64;
    let mut seen: HashSet<(Task, Vec<TokenId>)> = HashSet::new();
    let mut draw = |task: Task| -> Vec<TokenId> {
        loop {
            let payload: Vec<TokenId> = (0..l.n)
                .map(|_| {
                    counter += 1;
                    (rng::counter_u64(seed, stream, counter) % l.symbols as u64) as TokenId
                })
                .collect();
            let palindrome = payload.iter().eq(payload.iter().rev());
            if !palindrome && seen.insert((task, payload.clone())) {
                return payload;
            }
        }
    };
    let width = spec.calibration_queries.max(spec.eval_per_task).to_string().len();
    let mut out = Vec::new();
    for i in 0..spec.calibration_queries {
        let task = if i % 2 == 0 { Task::Copy } else { Task::Reverse };
        let payload = draw(task);
        out.push(ToyQuery {
            query_id: format!("cal-{i:0width$}"),
            split: Split::Calibration,
            task,
            prompt: prompt_for(&l, task, &payload),
            target: target_for(task, &payload),
        });
    }
    for task in [Task::Copy, Task::Reverse] {
        for i in 0..spec.eval_per_task {
            let payload = draw(task);
            out.push(ToyQuery {
                query_id: format!("eval-{task}-{i:0width$}"),
                split: Split::Eval,
                task,
                prompt: prompt_for(&l, task, &payload),
                target: target_for(task, &payload),
            });
        }
    }
    Ok(out)
}

/// Greedily decode an answer of up to `n` tokens (stopping early at SEP).
pub fn answer(model: &ToyModel, layout: &Layout, prompt: &[TokenId]) -> Result<Vec<TokenId>, ToyError> {
    let seq = model.greedy_decode(prompt, layout.n, layout.sep())?;
    Ok(seq[prompt.len()..].to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graded {
    pub query_id: String,
    pub task: Task,
    pub output: Vec<TokenId>,
    pub correct: bool,
}

pub fn grade(model: &ToyModel, layout: &Layout, queries: &[ToyQuery]) -> Result<Vec<Graded>, ToyError> {
    queries
        .iter()
        .map(|q| {
            let output = answer(model, layout, &q.prompt)?;
            Ok(Graded {
                query_id: q.query_id.clone(),
                task: q.task,
                correct: output == q.target,
                output,
            })
        })
        .collect()
}

/// Accuracy per task plus the unweighted mean over tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub copy: f64,
    pub reverse: f64,
}

impl TaskAccuracy {
    pub fn of(graded: &[Graded]) -> Self {
        let acc = |task| {
            let g: Vec<_> = graded.iter().filter(|g| g.task == task).collect();
            if g.is_empty() {
                0.0
            } else {
                g.iter().filter(|g| g.correct).count() as f64 / g.len() as f64
            }
        };
        Self {
            copy: acc(Task::Copy),
            reverse: acc(Task::Reverse),
        }
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Copy => self.copy,
            Task::Reverse => self.reverse,
        }
    }

    pub fn combined(&self) -> f64 {
        (self.copy + self.reverse) / 2.0
    }
}

pub fn eval_records(graded: &[Graded]) -> Vec<EvalRecord> {
    graded
        .iter()
        .map(|g| EvalRecord {
            benchmark: g.task.to_string(),
            correct: g.correct,
            token_count: g.output.len() as u64,
            text: None,
        })
        .collect()
}

/// Fraction of queries on which `merged` produced the same answer as the
/// specialist named by `labels` (and a different one from the other
/// specialist, unless both agree).
pub fn pattern_alignment(
    merged: &[Graded],
    long: &[Graded],
    short: &[Graded],
    labels: &BTreeMap<String, ModelTag>,
) -> f64 {
    let by_id = |g: &[Graded]| -> BTreeMap<String, Vec<TokenId>> {
        g.iter().map(|g| (g.query_id.clone(), g.output.clone())).collect()
    };
    let (l, s) = (by_id(long), by_id(short));
    let mut hits = 0usize;
    let mut total = 0usize;
    for m in merged {
        let Some(&label) = labels.get(&m.query_id) else {
            continue;
        };
        total += 1;
        let reference = match label {
            ModelTag::Long => &l[&m.query_id],
            ModelTag::Short => &s[&m.query_id],
        };
        hits += usize::from(&m.output == reference);
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Everything `gen-toy` writes.
#[derive(Debug, Clone)]
pub struct ToyFixture {
    pub spec: ToySpec,
    pub seed: u64,
    pub config: ModelConfig,
    pub long: Checkpoint,
    pub short: Checkpoint,
    pub queries: Vec<ToyQuery>,
    /// `k` graded samples per calibration query and model.
    pub responses: Vec<ResponseRecord>,
    pub eval_long: Vec<Graded>,
    pub eval_short: Vec<Graded>,
}

impl ToyFixture {
    pub fn calibration_prompts(&self) -> BTreeMap<String, Vec<TokenId>> {
        self.queries
            .iter()
            .filter(|q| q.split == Split::Calibration)
            .map(|q| (q.query_id.clone(), q.prompt.clone()))
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<ToyQuery> {
        self.queries.iter().filter(|q| q.split == split).cloned().collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.spec)
    }
}

/// Build both specialists and the task data, verifying on the held-out
/// split that each specialist solves its own task (≥ 0.95) and fails the
/// other (≤ 0.2).
pub fn generate(spec: &ToySpec, config: Option<ModelConfig>, seed: u64) -> Result<ToyFixture, ToyError> {
    check_spec(spec)?;
    let layout = Layout::new(spec);
    let config = config.unwrap_or_else(|| layout.default_config());
    layout.check_config(&config)?;
    let weights_seed = rng::derive_seed(seed, 1);
    let long = build_specialist(spec, &config, true, weights_seed)?;
    let short = build_specialist(spec, &config, false, weights_seed)?;
    let queries = sample_queries(spec, rng::derive_seed(seed, 2))?;
    let long_model = ToyModel::from_checkpoint(&long, config)?;
    let short_model = ToyModel::from_checkpoint(&short, config)?;

    let eval: Vec<ToyQuery> = queries.iter().filter(|q| q.split == Split::Eval).cloned().collect();
    let eval_long = grade(&long_model, &layout, &eval)?;
    let eval_short = grade(&short_model, &layout, &eval)?;
    for (tag, graded) in [(ModelTag::Long, &eval_long), (ModelTag::Short, &eval_short)] {
        let acc = TaskAccuracy::of(graded);
        for task in [Task::Copy, Task::Reverse] {
            let a = acc.get(task);
            let own = task.specialist() == tag;
            let ok = if own { a >= 0.95 } else { a <= 0.2 };
            if !ok {
                return Err(ToyError::Threshold {
                    seed,
                    model: tag,
                    task,
                    accuracy: a,
                    bound: if own { ">= 0.95" } else { "<= 0.2" },
                });
            }
        }
    }

    // Greedy decoding is deterministic, so the k samples of a query agree.
    let calibration: Vec<ToyQuery> = queries
        .iter()
        .filter(|q| q.split == Split::Calibration)
        .cloned()
        .collect();
    let mut responses = Vec::with_capacity(calibration.len() * 2 * spec.k);
    for (tag, model) in [(ModelTag::Long, &long_model), (ModelTag::Short, &short_model)] {
        for g in grade(model, &layout, &calibration)? {
            for i in 0..spec.k {
                responses.push(ResponseRecord {
                    query_id: g.query_id.clone(),
                    model: tag,
                    sample_index: i as u32,
                    correct: g.correct,
                    token_count: g.output.len() as u64,
                });
            }
        }
    }
    responses.sort_by(|a, b| {
        (&a.query_id, a.model, a.sample_index).cmp(&(&b.query_id, b.model, b.sample_index))
    });

    Ok(ToyFixture {
        spec: spec.clone(),
        seed,
        config,
        long,
        short,
        queries,
        responses,
        eval_long,
        eval_short,
    })
}
