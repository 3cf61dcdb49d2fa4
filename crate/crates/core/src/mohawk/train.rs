//! Stage runner, weight transfer, teacher pretraining and the bundled toy task.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::MarkovCorpus;
use super::losses::{
    hidden_state_alignment_loss, kd_loss, matrix_orientation_loss, taped_alignment_loss,
    taped_kd_loss, taped_orientation_loss,
};
use super::optim::{adamw_step, OptimizerState};
use super::plan::{wsd_lr, Stage, StagePlan};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mixer::{
    forward_parallel, materialize_mixer, project_inputs, taped_mixer, TapedMixer,
    ORIENTATION_PARAMS,
};
use crate::model::{
    taped_student, taped_teacher, Capture, LlambaConfig, LlambaModel, TeacherCapture,
    TeacherConfig, TeacherModel, DEFAULT_CHUNK,
};
use crate::params::{register_params, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether `name` is trained in `stage`.
pub fn trainable(stage: Stage, name: &str) -> bool {
    match stage {
        Stage::MatrixOrientation => name
            .split_once(".mixer.")
            .is_some_and(|(_, p)| ORIENTATION_PARAMS.contains(&p)),
        Stage::HiddenStateAlignment => name.contains(".mixer."),
        Stage::KnowledgeDistillation => true,
    }
}

fn check_depth<S: Scalar>(teacher: &TeacherModel<S>, student: &LlambaModel<S>) -> Result<()> {
    if teacher.layers.len() != student.blocks.len() {
        return Err(Error::Alignment(format!(
            "teacher has {} layers, student {} blocks",
            teacher.layers.len(),
            student.blocks.len()
        )));
    }
    if teacher.config.n_heads != student.config.n_heads {
        return Err(Error::Alignment(format!(
            "teacher has {} heads, student {}",
            teacher.config.n_heads, student.config.n_heads
        )));
    }
    Ok(())
}

/// Builds the stage objective for one sequence on `tape`, restricted to `layers`
/// for the per-layer stages.
fn stage_objective<S: Scalar>(
    tape: &mut Tape<S>,
    stage: Stage,
    student: &LlambaModel<S>,
    teacher_cap: &TeacherCapture<S>,
    teacher_logits: &Tensor<S>,
    tokens: &[usize],
    layers: &[usize],
) -> Result<Var> {
    let vars = register_params(tape, student, &|n| trainable(stage, n))?;
    let cfg = &student.config;
    if stage == Stage::KnowledgeDistillation {
        let logits = taped_student(tape, &vars, cfg, tokens)?;
        return taped_kd_loss(tape, logits, teacher_logits);
    }
    let mut total: Option<Var> = None;
    for &l in layers {
        let u = tape.constant(teacher_cap.attn_inputs[l].clone());
        let prefix = format!("blocks.{l}.mixer");
        let loss = if stage == Stage::MatrixOrientation {
            let trace = taped_mixer(tape, &vars, &prefix, cfg.mixer_dims(), u, TapedMixer::MatricesOnly)?;
            taped_orientation_loss(tape, &trace.matrices, &teacher_cap.attention[l])?
        } else {
            let trace = taped_mixer(tape, &vars, &prefix, cfg.mixer_dims(), u, TapedMixer::Full)?;
            let out = trace.output.expect("full mixer trace");
            taped_alignment_loss(tape, out, &teacher_cap.attn_outputs[l])?
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Alignment("no layers to align".into()))
}

/// Loss and gradients (trainable parameters only) for one sequence.
pub fn sequence_grads<S: Scalar>(
    stage: Stage,
    teacher: &TeacherModel<S>,
    student: &LlambaModel<S>,
    tokens: &[usize],
) -> Result<(S, BTreeMap<String, Tensor<S>>)> {
    let layers: Vec<usize> = (0..student.blocks.len()).collect();
    sequence_grads_for_layers(stage, teacher, student, tokens, &layers)
}

/// As [`sequence_grads`], with the per-layer stages restricted to `layers`.
pub fn sequence_grads_for_layers<S: Scalar>(
    stage: Stage,
    teacher: &TeacherModel<S>,
    student: &LlambaModel<S>,
    tokens: &[usize],
    layers: &[usize],
) -> Result<(S, BTreeMap<String, Tensor<S>>)> {
    check_depth(teacher, student)?;
    let (teacher_logits, cap) = teacher.forward(tokens, stage != Stage::KnowledgeDistillation)?;
    let mut tape = Tape::new();
    let loss = stage_objective(&mut tape, stage, student, &cap, &teacher_logits, tokens, layers)?;
    let value = tape.value(loss).item()?;
    let grads = tape
        .backward(loss)?
        .into_named()
        .into_iter()
        .filter(|(name, _)| trainable(stage, name))
        .collect();
    Ok((value, grads))
}

/// Maps `f` over sequences on scoped worker threads, preserving order.
fn map_sequences<T: Send>(
    seqs: &[Vec<usize>],
    f: impl Fn(&[usize]) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(seqs.len())
        .max(1);
    if workers == 1 {
        return seqs.iter().map(|s| f(s)).collect();
    }
    let chunk = seqs.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(|s| f(s)).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(seqs.len());
        for h in handles {
            out.extend(h.join().expect("training worker panicked")?);
        }
        Ok(out)
    })
}

/// Batch-mean loss and gradients. Per-sequence results are summed in batch
/// order, so the result does not depend on the number of worker threads.
pub fn batch_grads<S: Scalar>(
    stage: Stage,
    teacher: &TeacherModel<S>,
    student: &LlambaModel<S>,
    seqs: &[Vec<usize>],
) -> Result<(S, BTreeMap<String, Tensor<S>>)> {
    let parts = map_sequences(seqs, |s| sequence_grads(stage, teacher, student, s))?;
    reduce_mean(parts)
}

fn reduce_mean<S: Scalar>(
    parts: Vec<(S, BTreeMap<String, Tensor<S>>)>,
) -> Result<(S, BTreeMap<String, Tensor<S>>)> {
    let n = S::lit(parts.len() as f64);
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter
        .next()
        .ok_or_else(|| Error::Input("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (name, t) in g {
            grads
                .get_mut(&name)
                .expect("same parameter set per sequence")
                .add_assign(&t)?;
        }
    }
    let inv = S::one() / n;
    for g in grads.values_mut() {
        *g = g.scale(inv);
    }
    Ok((loss / n, grads))
}

/// Stage loss on `seqs` without gradients, averaged over sequences.
pub fn evaluate<S: Scalar>(
    stage: Stage,
    teacher: &TeacherModel<S>,
    student: &LlambaModel<S>,
    seqs: &[Vec<usize>],
) -> Result<f64> {
    check_depth(teacher, student)?;
    let per_seq = map_sequences(seqs, |tokens| -> Result<f64> {
        let (t_logits, cap) = teacher.forward(tokens, true)?;
        let mut total = S::zero();
        match stage {
            Stage::MatrixOrientation => {
                for (l, block) in student.blocks.iter().enumerate() {
                    let m = materialize_mixer(&project_inputs(&block.mixer, &cap.attn_inputs[l])?)?;
                    total += matrix_orientation_loss(&m, &cap.attention[l])?;
                }
            }
            Stage::HiddenStateAlignment => {
                for (l, block) in student.blocks.iter().enumerate() {
                    let out = forward_parallel(&block.mixer, &cap.attn_inputs[l], DEFAULT_CHUNK)?;
                    total += hidden_state_alignment_loss(&out, &cap.attn_outputs[l])?;
                }
            }
            Stage::KnowledgeDistillation => {
                let s_logits = student.forward(tokens, Capture::NONE)?.logits;
                total = kd_loss(&s_logits, &t_logits)?;
            }
        }
        Ok(total.as_f64())
    })?;
    Ok(per_seq.iter().sum::<f64>() / per_seq.len().max(1) as f64)
}

/// Optimizer loop for one stage; the batch at step `k` depends only on `k`.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub plan: StagePlan,
    pub student: LlambaModel<S>,
    pub opt: OptimizerState<S>,
    pub step: usize,
    /// Data stream the batches are drawn from.
    pub stream: u64,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(plan: StagePlan, student: LlambaModel<S>) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan,
            student,
            opt: OptimizerState::default(),
            step: 0,
            stream: plan.stage.number() as u64,
            losses: Vec::new(),
            lrs: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.plan.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn train_step(&mut self, teacher: &TeacherModel<S>, corpus: &MarkovCorpus) -> Result<f64> {
        let total = self.total_steps();
        let lr = wsd_lr(self.step, total, &self.plan)?;
        let seqs = corpus.batch(self.stream, self.step, self.plan.batch_size, self.plan.seq_len);
        let step = self.step;
        let (loss, grads) = batch_grads(self.plan.stage, teacher, &self.student, &seqs).map_err(|e| match e {
            Error::Numeric(_) => Error::NanLoss { step },
            other => other,
        })?;
        let loss = loss.as_f64();
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NanLoss { step: self.step });
        }
        adamw_step(&mut self.student, &grads, &mut self.opt, lr)?;
        self.losses.push(loss);
        self.lrs.push(lr);
        self.step += 1;
        Ok(loss)
    }

    pub fn run_steps(&mut self, teacher: &TeacherModel<S>, corpus: &MarkovCorpus, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.train_step(teacher, corpus)?;
        }
        Ok(())
    }

    pub fn run(&mut self, teacher: &TeacherModel<S>, corpus: &MarkovCorpus) -> Result<()> {
        let remaining = self.total_steps() - self.step.min(self.total_steps());
        self.run_steps(teacher, corpus, remaining)
    }
}

#[derive(Debug, Clone)]
pub struct StageReport<S> {
    pub stage: Stage,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    /// Stage loss on the held-out batch before the first step and after the last.
    pub eval_before: f64,
    pub eval_after: f64,
    pub student: LlambaModel<S>,
}

impl<S> StageReport<S> {
    /// `step,lr,loss` with one row per optimizer step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss\n");
        for (i, (lr, loss)) in self.lrs.iter().zip(&self.losses).enumerate() {
            let _ = writeln!(out, "{i},{lr:?},{loss:?}");
        }
        out
    }
}

/// Runs one stage end to end. Stage 3 begins with [`transfer_weights`].
pub fn run_stage<S: Scalar>(
    plan: StagePlan,
    teacher: &TeacherModel<S>,
    mut student: LlambaModel<S>,
    corpus: &MarkovCorpus,
    eval_sequences: usize,
) -> Result<StageReport<S>> {
    if plan.stage == Stage::KnowledgeDistillation {
        transfer_weights(teacher, &mut student)?;
    }
    let eval = corpus.eval_batch(eval_sequences.max(1), plan.seq_len);
    let eval_before = evaluate(plan.stage, teacher, &student, &eval)?;
    let mut trainer = Trainer::new(plan, student)?;
    trainer.run(teacher, corpus)?;
    let eval_after = evaluate(plan.stage, teacher, &trainer.student, &eval)?;
    Ok(StageReport {
        stage: plan.stage,
        losses: trainer.losses,
        lrs: trainer.lrs,
        eval_before,
        eval_after,
        student: trainer.student,
    })
}

/// Copies embedding, norms, MLPs and LM head from the teacher; mixers are untouched.
pub fn transfer_weights<S: Scalar>(teacher: &TeacherModel<S>, student: &mut LlambaModel<S>) -> Result<()> {
    let source = teacher.dense_params();
    let target = student.dense_params();
    // Attention weights and the position table have no student counterpart.
    for name in source
        .keys()
        .filter(|n| !n.contains(".attn.") && n.as_str() != "pos_embed")
    {
        if !target.contains_key(name) {
            return Err(Error::Transfer {
                tensor: name.clone(),
                reason: "missing from the student".into(),
            });
        }
    }
    for (name, t) in target.iter().filter(|(n, _)| !n.contains(".mixer.")) {
        match source.get(name) {
            None => {
                return Err(Error::Transfer {
                    tensor: name.clone(),
                    reason: "missing from the teacher (or quantized)".into(),
                })
            }
            Some(s) if s.shape() != t.shape() => {
                return Err(Error::Transfer {
                    tensor: name.clone(),
                    reason: format!("teacher shape {:?} vs student {:?}", s.shape(), t.shape()),
                })
            }
            Some(_) => {}
        }
    }
    student.for_each_dense_mut(&mut |name, t| {
        if !name.contains(".mixer.") {
            *t = source[name].clone();
        }
    });
    Ok(())
}

/// Next-token cross-entropy training of the teacher on the corpus.
pub fn pretrain_teacher<S: Scalar>(
    teacher: &mut TeacherModel<S>,
    corpus: &MarkovCorpus,
    plan: &StagePlan,
) -> Result<Vec<f64>> {
    plan.validate()?;
    let total = plan.total_steps();
    let vocab = teacher.config.vocab;
    let mut opt = OptimizerState::default();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let lr = wsd_lr(step, total, plan)?;
        let seqs = corpus.batch(TEACHER_STREAM, step, plan.batch_size, plan.seq_len + 1);
        let model = &*teacher;
        let parts = map_sequences(&seqs, |seq| {
            let (inputs, next) = (&seq[..seq.len() - 1], &seq[1..]);
            let targets = Tensor::from_fn(&[next.len(), vocab], |ix| {
                if next[ix[0]] == ix[1] {
                    S::one()
                } else {
                    S::zero()
                }
            });
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, model, &|_| true)?;
            let logits = taped_teacher(&mut tape, &vars, &model.config, inputs)?;
            let loss = tape.cross_entropy(logits, targets)?;
            let value = tape.value(loss).item()?;
            Ok((value, tape.backward(loss)?.into_named()))
        })?;
        let (loss, grads) = reduce_mean(parts)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss { step });
        }
        adamw_step(teacher, &grads, &mut opt, lr)?;
        losses.push(loss.as_f64());
    }
    Ok(losses)
}

const TEACHER_STREAM: u64 = 100;

pub const TOY_SEQ_LEN: usize = 32;
pub const TOY_STATE_DIM: usize = 16;

/// The bundled hermetic distillation task: Markov corpus plus a briefly
/// pretrained two-layer attention teacher.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub corpus: MarkovCorpus,
    pub teacher: TeacherModel<f64>,
    pub pretrain_losses: Vec<f64>,
}

impl ToyTask {
    pub fn teacher_plan() -> StagePlan {
        StagePlan {
            batch_size: 16,
            seq_len: TOY_SEQ_LEN,
            peak_lr: 3e-3,
            ..StagePlan::default_for(Stage::KnowledgeDistillation)
        }
        .with_steps(300)
    }

    pub fn build(seed: u64) -> Result<Self> {
        Self::build_with(seed, TeacherConfig::toy(), &Self::teacher_plan())
    }

    pub fn build_with(seed: u64, config: TeacherConfig, plan: &StagePlan) -> Result<Self> {
        let corpus = MarkovCorpus::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut teacher = TeacherModel::new(config, &mut rng)?;
        let pretrain_losses = pretrain_teacher(&mut teacher, &corpus, plan)?;
        Ok(Self {
            corpus,
            teacher,
            pretrain_losses,
        })
    }

    pub fn student_config(&self, state_dim: usize) -> LlambaConfig {
        self.teacher.config.student(state_dim)
    }

    /// Identity-initialized student matching the teacher's stack.
    pub fn student(&self, state_dim: usize, seed: u64) -> Result<LlambaModel<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LlambaModel::new(self.student_config(state_dim), &mut rng)
    }
}
