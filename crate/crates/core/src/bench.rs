//! Decode throughput and memory grid: recurrent student against a KV-cached
//! attention baseline.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mixer::RecurrentState;
use crate::model::{KvCache, LlambaModel, TeacherConfig, TeacherModel};
use crate::scalar::Scalar;

pub const DEFAULT_CONTEXTS: [usize; 4] = [64, 256, 1024, 4096];
pub const DEFAULT_BATCHES: [usize; 3] = [1, 8, 32];
pub const OOM: &str = "OOM";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub contexts: Vec<usize>,
    pub batches: Vec<usize>,
    /// Decode steps timed per lane once the context is filled.
    pub decode_steps: usize,
    /// Cells whose decode state would exceed this many bytes are reported as OOM.
    pub memory_limit: Option<usize>,
    /// Worker threads for the lanes of one cell.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            contexts: DEFAULT_CONTEXTS.to_vec(),
            batches: DEFAULT_BATCHES.to_vec(),
            decode_steps: 16,
            memory_limit: None,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub tokens_per_sec: f64,
    /// Median wall time of one decode step of one lane.
    pub ms_per_token: f64,
    /// Decode state across all lanes: SSM and conv buffers, or the KV cache.
    pub state_bytes: usize,
    /// Process peak resident set (`VmHWM`), when the platform reports it.
    pub peak_rss_bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub context: usize,
    pub batch: usize,
    /// `None` for a cell that ran out of memory.
    pub cell: Option<Measured>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

const HEADER: &str = "model,context,batch,tokens_per_sec,ms_per_token,state_bytes,peak_rss_bytes";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{},", r.model, r.context, r.batch);
            let _ = match &r.cell {
                Some(m) => writeln!(
                    out,
                    "{:?},{:?},{},{}",
                    m.tokens_per_sec,
                    m.ms_per_token,
                    m.state_bytes,
                    m.peak_rss_bytes.map_or(String::new(), |b| b.to_string())
                ),
                None => writeln!(out, "{OOM},{OOM},{OOM},{OOM}"),
            };
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("bench CSV header mismatch".into()));
        }
        let bad = |line: &str| Error::Format(format!("bad bench CSV row `{line}`"));
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let cell = if f[3..].iter().all(|c| *c == OOM) {
                None
            } else {
                Some(Measured {
                    tokens_per_sec: float(f[3])?,
                    ms_per_token: float(f[4])?,
                    state_bytes: num(f[5])?,
                    peak_rss_bytes: if f[6].is_empty() { None } else { Some(num(f[6])?) },
                })
            };
            rows.push(BenchRow {
                model: f[0].to_string(),
                context: num(f[1])?,
                batch: num(f[2])?,
                cell,
            });
        }
        Ok(Self { rows })
    }

    pub fn get(&self, model: &str, context: usize, batch: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.context == context && r.batch == batch)
    }
}

/// Peak resident set size from `/proc/self/status`.
pub fn peak_rss_bytes() -> Option<usize> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: usize = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Attention model with the student's depth, width, MLP and vocabulary, so
/// the parameter counts differ only by mixer versus attention projections.
pub fn matched_baseline_config<S: Scalar>(student: &LlambaModel<S>) -> TeacherConfig {
    let c = &student.config;
    TeacherConfig {
        n_layers: c.n_blocks,
        d_model: c.d_model,
        n_heads: c.n_heads,
        n_kv_heads: c.n_heads,
        head_dim: c.head_dim,
        mlp_hidden: c.mlp_hidden,
        vocab: c.vocab,
        norm_eps: c.norm_eps,
        max_positions: 0,
        recency: 0.0,
    }
}

/// A decoder the grid can drive: per-lane state plus a one-token step.
pub trait Decoder<S: Scalar>: Sync {
    type State: Clone + Send;

    fn name(&self) -> &'static str;
    fn fresh(&self) -> Self::State;
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<S>>;
    fn state_bytes(&self, state: &Self::State) -> usize;
    /// State bytes of one lane at `context` tokens, without building it.
    fn projected_bytes(&self, context: usize) -> usize;
    /// State after consuming `tokens`.
    fn fill(&self, tokens: &[usize]) -> Result<Self::State> {
        let mut st = self.fresh();
        for &t in tokens {
            self.step(&mut st, t)?;
        }
        Ok(st)
    }
}

impl<S: Scalar> Decoder<S> for LlambaModel<S> {
    type State = Vec<RecurrentState<S>>;

    fn name(&self) -> &'static str {
        "llamba"
    }

    fn fresh(&self) -> Self::State {
        self.new_states()
    }

    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<S>> {
        self.decode(state, token)
    }

    fn state_bytes(&self, state: &Self::State) -> usize {
        LlambaModel::state_bytes(state)
    }

    fn projected_bytes(&self, _context: usize) -> usize {
        self.blocks
            .iter()
            .map(|b| RecurrentState::<S>::byte_size_for(b.mixer.dims))
            .sum()
    }

    fn fill(&self, tokens: &[usize]) -> Result<Self::State> {
        if tokens.is_empty() {
            return Ok(self.fresh());
        }
        Ok(self.prefill(tokens)?.1)
    }
}

impl<S: Scalar> Decoder<S> for TeacherModel<S> {
    type State = KvCache<S>;

    fn name(&self) -> &'static str {
        "attention"
    }

    fn fresh(&self) -> Self::State {
        KvCache::new(&self.config)
    }

    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<S>> {
        self.decode(state, token)
    }

    fn state_bytes(&self, state: &Self::State) -> usize {
        state.byte_size()
    }

    fn projected_bytes(&self, context: usize) -> usize {
        KvCache::<S>::bytes_for(&self.config, context)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Deterministic filler tokens.
fn filler(vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|i| (i * 31 + 7) % vocab).collect()
}

/// Times one grid cell: fills the context once, clones the state per lane
/// and decodes `decode_steps` tokens on every lane.
pub fn bench_cell<S: Scalar, D: Decoder<S>>(
    model: &D,
    vocab: usize,
    context: usize,
    batch: usize,
    cfg: &BenchConfig,
) -> Result<BenchRow> {
    let row = |cell| BenchRow {
        model: model.name().to_string(),
        context,
        batch,
        cell,
    };
    let projected = batch * model.projected_bytes(context + cfg.decode_steps);
    if cfg.memory_limit.is_some_and(|limit| projected > limit) {
        return Ok(row(None));
    }
    let base = model.fill(&filler(vocab, context))?;
    let mut lanes = vec![base; batch];
    let threads = cfg.threads.clamp(1, batch.max(1));
    let per = batch.div_ceil(threads);
    let started = Instant::now();
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lanes
            .chunks_mut(per)
            .map(|chunk| {
                scope.spawn(move || {
                    let mut times = Vec::with_capacity(chunk.len() * cfg.decode_steps);
                    for lane in chunk.iter_mut() {
                        for k in 0..cfg.decode_steps {
                            let t0 = Instant::now();
                            let logits = model.step(lane, (context + k) % vocab)?;
                            times.push(t0.elapsed().as_secs_f64());
                            if logits.iter().any(|v| !v.is_finite()) {
                                return Err(Error::Numeric("non-finite logits in bench".into()));
                            }
                        }
                    }
                    Ok(times)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    let elapsed = started.elapsed().as_secs_f64();
    let mut times = Vec::new();
    for r in results {
        times.extend(r?);
    }
    let state_bytes = lanes.iter().map(|l| model.state_bytes(l)).sum();
    Ok(row(Some(Measured {
        tokens_per_sec: (batch * cfg.decode_steps) as f64 / elapsed.max(f64::MIN_POSITIVE),
        ms_per_token: 1e3 * median(times),
        state_bytes,
        peak_rss_bytes: peak_rss_bytes(),
    })))
}

/// Full grid for the student and, when given, the attention baseline.
pub fn run_bench<S: Scalar>(
    student: &LlambaModel<S>,
    baseline: Option<&TeacherModel<S>>,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.contexts.is_empty() || cfg.batches.is_empty() || cfg.batches.contains(&0) {
        return Err(Error::Config("bench needs contexts and positive batch sizes".into()));
    }
    if cfg.decode_steps == 0 {
        return Err(Error::Config("decode_steps must be positive".into()));
    }
    let vocab = student.config.vocab;
    let mut report = BenchReport::default();
    for &context in &cfg.contexts {
        for &batch in &cfg.batches {
            log::info!("bench llamba ctx={context} batch={batch}");
            report.rows.push(bench_cell(student, vocab, context, batch, cfg)?);
            if let Some(b) = baseline {
                log::info!("bench attention ctx={context} batch={batch}");
                report.rows.push(bench_cell(b, vocab, context, batch, cfg)?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LlambaConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> LlambaModel<f32> {
        let cfg = LlambaConfig {
            n_blocks: 1,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            state_dim: 3,
            mlp_hidden: 8,
            vocab: 16,
            norm_eps: 1e-5,
            tie_embeddings: false,
        };
        LlambaModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn grid_rows_and_csv_round_trip() {
        let s = tiny();
        let b = TeacherModel::new(matched_baseline_config(&s), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = BenchConfig {
            contexts: vec![4, 32],
            batches: vec![1, 3],
            decode_steps: 2,
            memory_limit: Some(KvCache::<f32>::bytes_for(&b.config, 20) * 3),
            threads: 2,
        };
        let report = run_bench(&s, Some(&b), &cfg).unwrap();
        assert_eq!(report.rows.len(), 8);
        let st = |c, n| report.get("llamba", c, n).unwrap().cell.unwrap().state_bytes;
        assert_eq!(st(4, 1), st(32, 1));
        assert_eq!(st(4, 3), 3 * st(4, 1));
        let kv = report.get("attention", 4, 1).unwrap().cell.unwrap().state_bytes;
        assert_eq!(kv, KvCache::<f32>::bytes_for(&b.config, 6));
        assert!(report.get("attention", 32, 3).unwrap().cell.is_none());
        assert!(report.get("attention", 32, 1).unwrap().cell.is_some());
        let csv = report.to_csv();
        assert!(csv.contains("OOM"));
        assert_eq!(BenchReport::from_csv(&csv).unwrap(), report);
    }

    #[test]
    fn rejects_empty_grid() {
        let s = tiny();
        let cfg = BenchConfig {
            batches: vec![],
            ..BenchConfig::default()
        };
        assert!(run_bench(&s, None, &cfg).is_err());
    }
}
