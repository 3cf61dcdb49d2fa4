//! The `LMBA` model file: magic, version, a `key=value` header, a tensor
//! table and 64-byte aligned little-endian payloads.
//!
//! Students, teachers and training checkpoints share the layout and differ in
//! the `kind` header key. See `docs/format.md` for the byte-level description.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::model::{LlambaConfig, LlambaModel, TeacherConfig, TeacherModel};
use crate::mohawk::{AdamW, OptimizerState, Stage, StagePlan, Trainer};
use crate::params::{ParamSet, Slot, SlotMut};
use crate::quant::QuantTensor;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LMBA";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_Q4: u8 = 2;

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload<S> {
    Dense(Tensor<S>),
    Quant(QuantTensor),
}

impl<S: Scalar> Payload<S> {
    fn shape(&self) -> &[usize] {
        match self {
            Payload::Dense(t) => t.shape(),
            Payload::Quant(q) => q.shape(),
        }
    }
}

/// A parsed file: header entries plus tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile<S> {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Payload<S>)>,
}

/// What a file holds, from its `kind` header key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Student,
    Teacher,
    Checkpoint,
}

impl FileKind {
    pub fn name(self) -> &'static str {
        match self {
            FileKind::Student => "student",
            FileKind::Teacher => "teacher",
            FileKind::Checkpoint => "checkpoint",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(FileKind::Student),
            "teacher" => Ok(FileKind::Teacher),
            "checkpoint" => Ok(FileKind::Checkpoint),
            other => Err(Error::Format(format!("unknown file kind `{other}`"))),
        }
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn q4_groups(shape: &[usize], group_size: usize) -> usize {
    let cols = shape.last().copied().unwrap_or(0);
    if cols == 0 {
        return 0;
    }
    let rows: usize = shape.iter().product::<usize>() / cols;
    rows * cols.div_ceil(group_size)
}

fn payload_len(tag: u8, shape: &[usize], group_size: Option<usize>) -> Result<usize> {
    let n: usize = shape.iter().product();
    match tag {
        TAG_F32 => Ok(4 * n),
        TAG_F64 => Ok(8 * n),
        _ => {
            let gs = group_size.ok_or_else(|| {
                Error::Format("q4 tensor present but quant.group_size missing".into())
            })?;
            let g = q4_groups(shape, gs);
            Ok(4 * g + g.div_ceil(2) + n.div_ceil(2))
        }
    }
}

fn check_header_text(key: &str, value: &str) -> Result<()> {
    if key.is_empty() || key.contains(['=', '\n']) || value.contains('\n') {
        return Err(Error::Format(format!("header entry `{key}` is not representable")));
    }
    Ok(())
}

impl<S: Scalar> ModelFile<S> {
    pub fn new(header: BTreeMap<String, String>) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: Payload<S>) {
        self.tensors.push((name.into(), payload));
    }

    pub fn kind(&self) -> Result<FileKind> {
        FileKind::parse(self.get("kind")?)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("header key `{key}` missing")))
    }

    /// Header entries under `prefix.` with the prefix removed.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, String> {
        let p = format!("{prefix}.");
        self.header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value `{raw}` for header key `{key}`")))
    }

    /// Serializes to bytes. `tensor_count` and `quant.group_size` are derived
    /// from the tensors and overwrite any caller-supplied values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.insert("tensor_count".into(), self.tensors.len().to_string());
        let mut group_size = None;
        for (name, p) in &self.tensors {
            if let Payload::Quant(q) = p {
                match group_size {
                    None => group_size = Some(q.group_size()),
                    Some(g) if g != q.group_size() => {
                        return Err(Error::Format(format!(
                            "tensor `{name}` uses group size {} but the file uses {g}",
                            q.group_size()
                        )))
                    }
                    _ => {}
                }
            }
        }
        header.remove("quant.group_size");
        if let Some(g) = group_size {
            header.insert("quant.group_size".into(), g.to_string());
        }
        let mut text = String::new();
        for (k, v) in &header {
            check_header_text(k, v)?;
            let _ = writeln!(text, "{k}={v}");
        }

        let mut table_len = 0;
        for (name, p) in &self.tensors {
            table_len += 4 + name.len() + 1 + 4 + 8 * p.shape().len() + 8;
        }
        let table_start = 4 + 4 + 8 + text.len();
        let mut offsets = Vec::with_capacity(self.tensors.len());
        let mut cursor = table_start + table_len;
        for (_, p) in &self.tensors {
            let start = align_up(cursor);
            let len = match p {
                Payload::Dense(t) => t.len() * S::DTYPE.size_of(),
                Payload::Quant(q) => q.byte_size(),
            };
            if len == 0 {
                return Err(Error::Format("empty tensors cannot be stored".into()));
            }
            offsets.push(start);
            cursor = start + len;
        }

        let mut out = Vec::with_capacity(cursor);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for ((name, p), &offset) in self.tensors.iter().zip(&offsets) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match p {
                Payload::Dense(_) => match S::DTYPE {
                    DType::F32 => TAG_F32,
                    DType::F64 => TAG_F64,
                },
                Payload::Quant(_) => TAG_Q4,
            });
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &e in p.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&(offset as u64).to_le_bytes());
        }
        for ((_, p), &offset) in self.tensors.iter().zip(&offsets) {
            out.resize(offset, 0);
            match p {
                Payload::Dense(t) => t.data().iter().for_each(|&x| x.write_le(&mut out)),
                Payload::Quant(q) => {
                    q.scales()
                        .iter()
                        .for_each(|s| out.extend_from_slice(&s.to_le_bytes()));
                    out.extend_from_slice(q.packed_zero_points());
                    out.extend_from_slice(q.packed_codes());
                }
            }
        }
        Ok(out)
    }

    /// Parses and validates a whole file. Dense payloads stored in the other
    /// float width are converted to `S`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"LMBA\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = r.u64("header length")?;
        let text = r.take(usize::try_from(header_len).unwrap_or(usize::MAX), "header")?;
        let text = std::str::from_utf8(text)
            .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line `{line}` has no `=`")))?;
            if header.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Format(format!("duplicate header key `{k}`")));
            }
        }
        let mut file = ModelFile::new(header);
        let count: usize = file.parse_key("tensor_count")?;
        let group_size = match file.header.get("quant.group_size") {
            Some(_) => Some(file.parse_key::<usize>("quant.group_size")?).filter(|&g| g > 0),
            None => None,
        };

        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("tensor table")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor table")?)
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?
                .to_string();
            let tag = r.take(1, "tensor table")?[0];
            if tag > TAG_Q4 {
                return Err(Error::UnknownDtype { tensor: name, tag });
            }
            let rank = r.u32("tensor table")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("tensor table")?).unwrap_or(usize::MAX));
            }
            let offset = usize::try_from(r.u64("tensor table")?).unwrap_or(usize::MAX);
            entries.push((name, tag, shape, offset));
        }

        let mut end = r.pos;
        for (name, tag, shape, offset) in entries {
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::Format(format!("tensor `{name}` has invalid shape {shape:?}")));
            }
            if offset % ALIGN != 0 || offset < end {
                return Err(Error::Format(format!(
                    "tensor `{name}` payload offset {offset} is misaligned or overlaps"
                )));
            }
            let len = payload_len(tag, &shape, group_size)?;
            let stop = offset.checked_add(len).filter(|&s| s <= bytes.len());
            let Some(stop) = stop else {
                return Err(Error::Truncated { tensor: name });
            };
            let data = &bytes[offset..stop];
            let payload = match tag {
                TAG_F32 => Payload::Dense(Tensor::new(
                    shape,
                    data.chunks_exact(4)
                        .map(|c| S::lit(f32::read_le(c) as f64))
                        .collect(),
                )?),
                TAG_F64 => Payload::Dense(Tensor::new(
                    shape,
                    data.chunks_exact(8)
                        .map(|c| S::lit(f64::read_le(c)))
                        .collect(),
                )?),
                _ => {
                    let gs = group_size.expect("checked by payload_len");
                    let g = q4_groups(&shape, gs);
                    let scales = data[..4 * g].chunks_exact(4).map(f32::read_le).collect();
                    let zps = data[4 * g..4 * g + g.div_ceil(2)].to_vec();
                    let codes = data[4 * g + g.div_ceil(2)..].to_vec();
                    Payload::Quant(QuantTensor::from_parts(shape, gs, scales, zps, codes)?)
                }
            };
            file.tensors.push((name, payload));
            end = stop;
        }
        if end != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last payload",
                bytes.len() - end
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Removes and returns the tensor called `name`.
    fn take(&mut self, name: &str) -> Option<Payload<S>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    fn take_dense(&mut self, name: &str) -> Result<Tensor<S>> {
        match self.take(name) {
            Some(Payload::Dense(t)) => Ok(t),
            Some(Payload::Quant(_)) => Err(Error::Format(format!("tensor `{name}` must be dense"))),
            None => Err(Error::Format(format!("tensor `{name}` missing"))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("file ends inside the {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn base_header<S: Scalar>(kind: FileKind, config: Vec<(String, String)>) -> BTreeMap<String, String> {
    let mut h = BTreeMap::new();
    h.insert("kind".into(), kind.name().into());
    h.insert("dtype".into(), S::DTYPE.name().into());
    for (k, v) in config {
        h.insert(format!("config.{k}"), v);
    }
    h
}

fn push_params<S: Scalar>(file: &mut ModelFile<S>, model: &impl ParamSet<S>) {
    model.visit(&mut |name, slot| {
        let payload = match slot {
            Slot::Tensor(t) | Slot::Linear(Linear::Dense(t)) => Payload::Dense(t.clone()),
            Slot::Linear(Linear::Quant(q)) => Payload::Quant(q.clone()),
        };
        file.push(name, payload);
    });
}

/// Moves every parameter of `model` out of `file`, replacing the placeholder weights.
fn fill_params<S: Scalar>(file: &mut ModelFile<S>, model: &mut impl ParamSet<S>) -> Result<()> {
    let mut err = None;
    model.visit_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        let Some(payload) = file.take(name) else {
            err = Some(Error::Format(format!("tensor `{name}` missing")));
            return;
        };
        let mismatch = |expected: &[usize], got: &[usize]| {
            Error::Format(format!("tensor `{name}`: expected shape {expected:?}, found {got:?}"))
        };
        match (slot, payload) {
            (SlotMut::Tensor(t), Payload::Dense(v)) => {
                if t.shape() != v.shape() {
                    err = Some(mismatch(t.shape(), v.shape()));
                } else {
                    *t = v;
                }
            }
            (SlotMut::Tensor(_), Payload::Quant(_)) => {
                err = Some(Error::Format(format!("tensor `{name}` must not be quantized")));
            }
            (SlotMut::Linear(l), p) => {
                let expected = [l.in_dim(), l.out_dim()];
                let (ok, replacement) = match p {
                    Payload::Dense(v) => (v.shape() == expected, Linear::Dense(v)),
                    Payload::Quant(q) => (q.shape() == [expected[1], expected[0]], Linear::Quant(q)),
                };
                if ok {
                    *l = replacement;
                } else {
                    let got = match &replacement {
                        Linear::Dense(v) => v.shape().to_vec(),
                        Linear::Quant(q) => q.shape().to_vec(),
                    };
                    err = Some(mismatch(&expected, &got));
                }
            }
        }
    });
    err.map_or(Ok(()), Err)
}

fn reject_leftovers<S>(file: &ModelFile<S>) -> Result<()> {
    match file.tensors.first() {
        Some((name, _)) => Err(Error::Format(format!("unexpected tensor `{name}`"))),
        None => Ok(()),
    }
}

fn student_from<S: Scalar>(file: &mut ModelFile<S>) -> Result<LlambaModel<S>> {
    let config = LlambaConfig::from_kv(&file.section("config"))?;
    let mut model = LlambaModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_params(file, &mut model)?;
    Ok(model)
}

pub fn student_file<S: Scalar>(model: &LlambaModel<S>) -> ModelFile<S> {
    let mut file = ModelFile::new(base_header::<S>(FileKind::Student, model.config.to_kv()));
    push_params(&mut file, model);
    file
}

pub fn save_student<S: Scalar>(model: &LlambaModel<S>, path: &Path) -> Result<()> {
    student_file(model).save(path)
}

/// Loads a student from a student file or from the student inside a checkpoint.
pub fn load_student<S: Scalar>(path: &Path) -> Result<LlambaModel<S>> {
    let mut file = ModelFile::<S>::load(path)?;
    match file.kind()? {
        FileKind::Student => {
            let model = student_from(&mut file)?;
            reject_leftovers(&file)?;
            Ok(model)
        }
        FileKind::Checkpoint => Ok(checkpoint_from(file)?.trainer.student),
        FileKind::Teacher => Err(Error::Format(format!(
            "{} holds a teacher, not a student",
            path.display()
        ))),
    }
}

pub fn teacher_file<S: Scalar>(model: &TeacherModel<S>) -> ModelFile<S> {
    let mut file = ModelFile::new(base_header::<S>(FileKind::Teacher, model.config.to_kv()));
    push_params(&mut file, model);
    file
}

pub fn save_teacher<S: Scalar>(model: &TeacherModel<S>, path: &Path) -> Result<()> {
    teacher_file(model).save(path)
}

pub fn load_teacher<S: Scalar>(path: &Path) -> Result<TeacherModel<S>> {
    let mut file = ModelFile::<S>::load(path)?;
    if file.kind()? != FileKind::Teacher {
        return Err(Error::Format(format!("{} does not hold a teacher", path.display())));
    }
    let config = TeacherConfig::from_kv(&file.section("config"))?;
    let mut model = TeacherModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_params(&mut file, &mut model)?;
    reject_leftovers(&file)?;
    Ok(model)
}

/// A stage in progress: the trainer (student, optimizer moments, step, loss
/// history) plus the run seed.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub seed: u64,
    pub trainer: Trainer<S>,
}

pub fn checkpoint_file<S: Scalar>(ckpt: &Checkpoint<S>) -> ModelFile<S> {
    let t = &ckpt.trainer;
    let mut h = base_header::<S>(FileKind::Checkpoint, t.student.config.to_kv());
    let p = &t.plan;
    let hyper = &t.opt.hyper;
    let entries: [(&str, String); 17] = [
        ("seed", ckpt.seed.to_string()),
        ("plan.stage", p.stage.number().to_string()),
        ("plan.token_budget", p.token_budget.to_string()),
        ("plan.batch_size", p.batch_size.to_string()),
        ("plan.seq_len", p.seq_len.to_string()),
        ("plan.peak_lr", format!("{:?}", p.peak_lr)),
        ("plan.warmup_frac", format!("{:?}", p.warmup_frac)),
        ("plan.decay_frac", format!("{:?}", p.decay_frac)),
        ("plan.min_lr", format!("{:?}", p.min_lr)),
        ("trainer.step", t.step.to_string()),
        ("trainer.stream", t.stream.to_string()),
        ("trainer.history", t.losses.len().to_string()),
        ("opt.step", t.opt.step.to_string()),
        ("opt.beta1", format!("{:?}", hyper.beta1)),
        ("opt.beta2", format!("{:?}", hyper.beta2)),
        ("opt.weight_decay", format!("{:?}", hyper.weight_decay)),
        ("opt.eps", format!("{:?}", hyper.eps)),
    ];
    for (k, v) in entries {
        h.insert(k.into(), v);
    }
    let mut file = ModelFile::new(h);
    push_params(&mut file, &t.student);
    for (prefix, moments) in [("opt.m", &t.opt.m), ("opt.v", &t.opt.v)] {
        for (name, m) in moments {
            file.push(format!("{prefix}.{name}"), Payload::Dense(m.clone()));
        }
    }
    if !t.losses.is_empty() {
        let n = t.losses.len();
        let lit = |v: &[f64]| Tensor::new(vec![n], v.iter().map(|&x| S::lit(x)).collect());
        file.push("history.loss", Payload::Dense(lit(&t.losses).expect("length matches")));
        file.push("history.lr", Payload::Dense(lit(&t.lrs).expect("length matches")));
    }
    file
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    checkpoint_file(ckpt).save(path)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let file = ModelFile::<S>::load(path)?;
    if file.kind()? != FileKind::Checkpoint {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    checkpoint_from(file)
}

fn checkpoint_from<S: Scalar>(mut file: ModelFile<S>) -> Result<Checkpoint<S>> {
    let stage = Stage::from_number(file.parse_key("plan.stage")?)?;
    let plan = StagePlan {
        stage,
        token_budget: file.parse_key("plan.token_budget")?,
        batch_size: file.parse_key("plan.batch_size")?,
        seq_len: file.parse_key("plan.seq_len")?,
        peak_lr: file.parse_key("plan.peak_lr")?,
        warmup_frac: file.parse_key("plan.warmup_frac")?,
        decay_frac: file.parse_key("plan.decay_frac")?,
        min_lr: file.parse_key("plan.min_lr")?,
    };
    let hyper = AdamW {
        beta1: file.parse_key("opt.beta1")?,
        beta2: file.parse_key("opt.beta2")?,
        weight_decay: file.parse_key("opt.weight_decay")?,
        eps: file.parse_key("opt.eps")?,
    };
    let mut opt = OptimizerState::new(hyper);
    opt.step = file.parse_key("opt.step")?;
    let seed = file.parse_key("seed")?;
    let step = file.parse_key("trainer.step")?;
    let stream = file.parse_key("trainer.stream")?;
    let history: usize = file.parse_key("trainer.history")?;

    let student = student_from(&mut file)?;
    for prefix in ["opt.m.", "opt.v."] {
        let names: Vec<String> = file
            .tensors
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(prefix).map(str::to_string))
            .collect();
        for name in names {
            let t = file.take_dense(&format!("{prefix}{name}"))?;
            let target = if prefix == "opt.m." { &mut opt.m } else { &mut opt.v };
            target.insert(name, t);
        }
    }
    let (losses, lrs) = if history > 0 {
        let loss = file.take_dense("history.loss")?;
        let lr = file.take_dense("history.lr")?;
        if loss.len() != history || lr.len() != history {
            return Err(Error::Format("loss history length mismatch".into()));
        }
        (
            loss.data().iter().map(|x| x.as_f64()).collect(),
            lr.data().iter().map(|x| x.as_f64()).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    reject_leftovers(&file)?;
    let params = student.dense_params();
    for (name, m) in opt.m.iter().chain(&opt.v) {
        match params.get(name) {
            Some(p) if p.shape() == m.shape() => {}
            _ => {
                return Err(Error::Format(format!(
                    "optimizer moment for `{name}` does not match a parameter"
                )))
            }
        }
    }
    plan.validate()?;
    Ok(Checkpoint {
        seed,
        trainer: Trainer {
            plan,
            student,
            opt,
            step,
            stream,
            losses,
            lrs,
        },
    })
}

/// Header of a file, without decoding payloads beyond validation.
pub fn read_header(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(ModelFile::<f32>::load(path)?.header)
}
