use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use llamba::bench::{matched_baseline_config, run_bench, BenchConfig};
use llamba::io::{self, Checkpoint};
use llamba::model::{sample, LlambaConfig, LlambaModel, Preset, TeacherModel};
use llamba::mohawk::{evaluate, transfer_weights, DistillConfig, MarkovCorpus, Stage, ToyTask, Trainer};
use llamba::mohawk::data::ByteTokenizer;
use llamba::params::{ParamSet, Slot};
use llamba::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Header key naming the corpus a teacher was trained on.
pub const CORPUS_SEED_KEY: &str = "corpus_seed";

/// Logits from the token-by-token path must match the one-pass forward this closely.
const VERIFY_TOL: f64 = 1e-4;

pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const BAD_INPUT: u8 = 2;
    pub const GENERATION_NAN: u8 = 3;
    pub const TRAINING_NAN: u8 = 4;
    pub const VERIFY_MISMATCH: u8 = 5;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn input(msg: impl Display) -> Self {
        Self::new(exit::BAD_INPUT, anyhow!("{msg}"))
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::new(exit::FAILURE, error)
    }
}

/// Errors from reading a model or config are the caller's fault.
fn bad_input(e: Error) -> Failure {
    Failure::new(exit::BAD_INPUT, e)
}

fn load_student(path: &Path) -> Result<LlambaModel<f32>, Failure> {
    io::load_student(path).map_err(bad_input)
}

fn is_quantized<S: llamba::Scalar>(model: &LlambaModel<S>) -> bool {
    let mut any = false;
    model.visit(&mut |_, slot| {
        if let Slot::Linear(l) = slot {
            any |= l.is_quantized();
        }
    });
    any
}

fn max_abs(v: &[f32]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(f64::from(x.abs())))
}

pub fn generate(model: &Path, prompt: &str, max_tokens: usize, temp: f64, seed: u64, verify: bool) -> Result<(), Failure> {
    let model = load_student(model)?;
    if !(temp >= 0.0 && temp.is_finite()) {
        return Err(Failure::input(format!("--temp must be finite and >= 0, got {temp}")));
    }
    let mut tokens = ByteTokenizer.encode(prompt);
    if tokens.is_empty() {
        if model.config.vocab <= ByteTokenizer::BOS {
            return Err(Failure::input("empty prompt and the model has no BOS token"));
        }
        tokens.push(ByteTokenizer::BOS);
    }
    model.check_tokens(&tokens).map_err(bad_input)?;
    if max_tokens == 0 {
        return Ok(());
    }

    let nan = |e: Error| match e {
        Error::Numeric(_) => Failure::new(exit::GENERATION_NAN, e),
        other => Failure::new(exit::FAILURE, other),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (logits, mut states) = model.prefill(&tokens).map_err(nan)?;
    let mut step_logits = vec![logits.row(tokens.len() - 1).to_vec()];
    let mut out = Vec::with_capacity(max_tokens);
    let stdout = std::io::stdout();
    let mut sink = stdout.lock();
    loop {
        let next = sample(step_logits.last().expect("non-empty"), temp, &mut rng).map_err(nan)?;
        out.push(next);
        if next < 256 {
            sink.write_all(&[next as u8]).context("writing to stdout")?;
            sink.flush().context("writing to stdout")?;
        }
        if out.len() == max_tokens || next == ByteTokenizer::EOS {
            break;
        }
        step_logits.push(model.decode(&mut states, next).map_err(nan)?);
    }
    writeln!(sink).context("writing to stdout")?;

    if verify {
        let mut seq = tokens.clone();
        seq.extend_from_slice(&out[..out.len() - 1]);
        let full = model.forward(&seq, Default::default()).map_err(nan)?.logits;
        let mut worst = 0.0f64;
        for (k, decoded) in step_logits.iter().enumerate() {
            let reference = full.row(tokens.len() - 1 + k);
            let diff = decoded
                .iter()
                .zip(reference)
                .fold(0.0f64, |m, (a, b)| m.max(f64::from((a - b).abs())));
            let scale = max_abs(decoded).max(max_abs(reference)).max(1e-12);
            worst = worst.max(diff / scale);
        }
        eprintln!("verify: max relative logit difference {worst:.3e} over {} steps", step_logits.len());
        if worst > VERIFY_TOL {
            return Err(Failure::new(
                exit::VERIFY_MISMATCH,
                anyhow!("decode and one-pass logits differ by {worst:.3e} (tolerance {VERIFY_TOL:e})"),
            ));
        }
    }
    Ok(())
}

fn parse_stages(stage: &str) -> Result<Vec<Stage>, Failure> {
    if stage.eq_ignore_ascii_case("all") {
        return Ok(Stage::ALL.to_vec());
    }
    stage
        .parse::<u8>()
        .map_err(|_| Failure::input(format!("--stage must be 1, 2, 3 or all, got `{stage}`")))
        .and_then(|n| Stage::from_number(n).map_err(bad_input))
        .map(|s| vec![s])
}

/// Same layout as `StageReport::to_csv`: one row per optimizer step.
fn stage_csv(trainer: &Trainer<f64>) -> String {
    let mut out = String::from("step,lr,loss\n");
    for (i, (lr, loss)) in trainer.lrs.iter().zip(&trainer.losses).enumerate() {
        out.push_str(&format!("{i},{lr:?},{loss:?}\n"));
    }
    out
}

pub fn report_path(out: &Path, stage: Stage) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "distill".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.stage{}.csv", stage.number()))
}

pub fn distill(config: Option<&Path>, stage: &str, teacher: &Path, out: &Path, init: Option<&Path>) -> Result<(), Failure> {
    let stages = parse_stages(stage)?;
    let cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(|e| Failure::new(exit::BAD_INPUT, e))?;
            DistillConfig::parse(&text).map_err(bad_input)?
        }
        None => DistillConfig::default(),
    };
    let header = io::read_header(teacher).map_err(bad_input)?;
    let teacher: TeacherModel<f64> = io::load_teacher(teacher).map_err(bad_input)?;
    let corpus_seed = match header.get(CORPUS_SEED_KEY) {
        Some(v) => v
            .parse()
            .map_err(|_| Failure::input(format!("bad {CORPUS_SEED_KEY} `{v}` in teacher header")))?,
        None => cfg.seed,
    };
    let corpus = MarkovCorpus::new(corpus_seed);

    let mut student: LlambaModel<f64> = match init {
        Some(p) => io::load_student(p).map_err(bad_input)?,
        None => {
            if stages[0] != Stage::MatrixOrientation {
                log::warn!(
                    "no checkpoint from the previous stage given; stage {} starts from identity init",
                    stages[0]
                );
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            LlambaModel::new(teacher.config.student(cfg.state_dim), &mut rng).map_err(bad_input)?
        }
    };
    if student.config.vocab != teacher.config.vocab || student.config.d_model != teacher.config.d_model {
        return Err(Failure::input("student and teacher dimensions differ"));
    }

    let kd_eval = corpus.eval_batch(cfg.eval_sequences.max(1), cfg.plan(Stage::KnowledgeDistillation).seq_len);
    let train_err = |e: Error| match e {
        Error::NanLoss { .. } => Failure::new(exit::TRAINING_NAN, e),
        other => Failure::new(exit::FAILURE, other),
    };
    let kd_initial = evaluate(Stage::KnowledgeDistillation, &teacher, &student, &kd_eval).map_err(train_err)?;
    let started = Instant::now();
    for &stage in &stages {
        let plan = *cfg.plan(stage);
        if stage == Stage::KnowledgeDistillation {
            transfer_weights(&teacher, &mut student).map_err(bad_input)?;
        }
        let eval = corpus.eval_batch(cfg.eval_sequences.max(1), plan.seq_len);
        let before = evaluate(stage, &teacher, &student, &eval).map_err(train_err)?;
        let t0 = Instant::now();
        let mut trainer = Trainer::new(plan, student).map_err(bad_input)?;
        trainer.run(&teacher, &corpus).map_err(train_err)?;
        let after = evaluate(stage, &teacher, &trainer.student, &eval).map_err(train_err)?;
        eprintln!(
            "stage {stage}: {} steps in {:.1?}, eval loss {before:.5} -> {after:.5}",
            trainer.step,
            t0.elapsed()
        );
        let csv = report_path(out, stage);
        std::fs::write(&csv, stage_csv(&trainer)).with_context(|| format!("writing {}", csv.display()))?;
        let ckpt = Checkpoint { seed: cfg.seed, trainer };
        io::save_checkpoint(&ckpt, out).map_err(|e| Failure::new(exit::FAILURE, e))?;
        student = ckpt.trainer.student;
    }
    let kd_final = evaluate(Stage::KnowledgeDistillation, &teacher, &student, &kd_eval).map_err(train_err)?;
    eprintln!(
        "kd loss {kd_initial:.5} -> {kd_final:.5} ({:.1}% lower) in {:.1?}",
        100.0 * (1.0 - kd_final / kd_initial),
        started.elapsed()
    );
    Ok(())
}

pub fn quantize(model: &Path, bits: u32, group: usize, out: &Path) -> Result<(), Failure> {
    if bits != 4 {
        return Err(Failure::input(format!("only 4-bit quantization is supported, got --bits {bits}")));
    }
    let m = load_student(model)?;
    if is_quantized(&m) {
        return Err(Failure::input(format!("{} is already quantized", model.display())));
    }
    let q = m.quantized(group).map_err(bad_input)?;
    io::save_student(&q, out).map_err(|e| Failure::new(exit::FAILURE, e))?;
    let size = |p: &Path| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0);
    let (before, after) = (size(model), size(out));
    eprintln!(
        "{} bytes -> {} bytes ({:.2}x smaller)",
        before,
        after,
        before as f64 / after.max(1) as f64
    );
    Ok(())
}

pub fn bench(model: &Path, baseline: bool, cfg: &BenchConfig, out: Option<&Path>) -> Result<(), Failure> {
    let student = load_student(model)?;
    let base = if baseline {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Some(TeacherModel::<f32>::new(matched_baseline_config(&student), &mut rng).map_err(bad_input)?)
    } else {
        None
    };
    let report = run_bench(&student, base.as_ref(), cfg).map_err(bad_input)?;
    let csv = report.to_csv();
    match out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn teacher(out: &Path, seed: u64, steps: Option<usize>) -> Result<(), Failure> {
    let mut plan = ToyTask::teacher_plan();
    if let Some(s) = steps {
        if s == 0 {
            return Err(Failure::input("--steps must be positive"));
        }
        plan = plan.with_steps(s);
    }
    let t0 = Instant::now();
    let task = ToyTask::build_with(seed, llamba::model::TeacherConfig::toy(), &plan).map_err(bad_input)?;
    let l = &task.pretrain_losses;
    eprintln!(
        "teacher pretrained: loss {:.4} -> {:.4} over {} steps in {:.1?}",
        l[0],
        l[l.len() - 1],
        l.len(),
        t0.elapsed()
    );
    let mut file = io::teacher_file(&task.teacher);
    file.header.insert(CORPUS_SEED_KEY.into(), seed.to_string());
    file.save(out).map_err(|e| Failure::new(exit::FAILURE, e))?;
    Ok(())
}

pub fn init(preset: Preset, out: &Path, seed: u64) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LlambaModel::<f32>::new(LlambaConfig::toy(preset), &mut rng).map_err(bad_input)?;
    io::save_student(&model, out).map_err(|e| Failure::new(exit::FAILURE, e))?;
    Ok(())
}
