use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::retrieval::{hard_negative_probs, itc_loss, rerank, recall_at_k, sample_hard_negative, Direction, RetrievalIndex};
use super::{avgpool_classify, embed_images, embed_texts, fusion_classify, itm_logits, nlvr_forward, FtContext, FtTask, Heads};
use crate::backbone::MomeModel;
use crate::error::{Error, Result};
use crate::input::image::{patchify, PatchGrid};
use crate::input::synthetic::{gen_synthetic, generate_item, Sample, SyntheticTask};
use crate::input::text::{tokenize, TextTokens, Vocab};
use crate::pretrain::{adam_step, argmax, lr_at_step, AdamConfig, AdamState};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FtConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub adam: AdamConfig,
    pub drop_path: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub retrieval_size: usize,
    pub rerank_k: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    /// Seeds the training items, batch draws, and stochastic depth.
    pub train_seed: u64,
    /// Seeds the held-out items.
    pub eval_seed: u64,
}

/// A preprocessed downstream example.
#[derive(Clone, Debug, PartialEq)]
pub enum FtExample {
    Vqa {
        image: PatchGrid,
        question: TextTokens,
        answer: usize,
    },
    Nlvr {
        left: PatchGrid,
        right: PatchGrid,
        statement: TextTokens,
        label: usize,
    },
    Pair {
        image: PatchGrid,
        text: TextTokens,
        caption: String,
    },
    ImgCls {
        image: PatchGrid,
        label: usize,
    },
}

fn synthetic_task(task: FtTask) -> SyntheticTask {
    match task {
        FtTask::Vqa => SyntheticTask::Vqa,
        FtTask::Nlvr => SyntheticTask::Nlvr,
        FtTask::Retrieval => SyntheticTask::Retrieval,
        FtTask::ImgCls => SyntheticTask::ImgCls,
    }
}

fn prepare(s: Sample, cfg: &FtConfig, vocab: &Vocab) -> Result<FtExample> {
    let grid = |img| patchify(img, cfg.patch_size);
    let text = |t: &str| tokenize(t, vocab).truncated(cfg.max_text_len.saturating_sub(2));
    Ok(match s {
        Sample::Vqa { image, question, answer } => FtExample::Vqa {
            image: grid(&image)?,
            question: text(&question),
            answer,
        },
        Sample::Nlvr { left, right, statement, label } => FtExample::Nlvr {
            left: grid(&left)?,
            right: grid(&right)?,
            statement: text(&statement),
            label: label as usize,
        },
        Sample::Pair { image, caption } => FtExample::Pair {
            image: grid(&image)?,
            text: text(&caption),
            caption,
        },
        Sample::ImgCls { image, label } => FtExample::ImgCls {
            image: grid(&image)?,
            label,
        },
        other => return Err(Error::Contract(format!("not a downstream sample: {other:?}"))),
    })
}

/// The fixed training set: items `0..train_size` of the task.
pub fn train_examples(cfg: &FtConfig, task: FtTask, vocab: &Vocab) -> Result<Vec<FtExample>> {
    (0..cfg.train_size as u64)
        .map(|i| prepare(generate_item(cfg.train_seed, synthetic_task(task), i, cfg.image_size), cfg, vocab))
        .collect()
}

/// Held-out examples; retrieval uses a corpus of distinct captions.
pub fn eval_examples(cfg: &FtConfig, task: FtTask, vocab: &Vocab) -> Result<Vec<FtExample>> {
    let n = match task {
        FtTask::Retrieval => cfg.retrieval_size,
        _ => cfg.eval_size,
    };
    gen_synthetic(cfg.eval_seed, n, synthetic_task(task), cfg.image_size)?
        .into_iter()
        .map(|s| prepare(s, cfg, vocab))
        .collect()
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut x = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

/// Per-step training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FtReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl FtReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Held-out metrics of one task, in report order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub metrics: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// `metric<TAB>value` lines.
    pub fn lines(&self) -> String {
        self.metrics.iter().map(|(n, v)| format!("{n}\t{v:.6}\n")).collect()
    }

    /// Summary in the metrics-log layout, `step<TAB>task<TAB>loss<TAB>acc`:
    /// one row per accuracy-like metric, paired with the loss when reported.
    pub fn summary(&self, step: u64) -> String {
        let mut s = String::from("step\ttask\tloss\tacc\n");
        let loss = self.get("loss").map(|l| format!("{l:.6}")).unwrap_or_default();
        for (n, v) in self.metrics.iter().filter(|(n, _)| n != "loss" && !n.ends_with("_loss")) {
            let task = if n == "accuracy" { self.task.clone() } else { format!("{}_{n}", self.task) };
            let l = self
                .get(&format!("{}_loss", n.trim_end_matches("_acc")))
                .map(|l| format!("{l:.6}"))
                .unwrap_or_else(|| loss.clone());
            s.push_str(&format!("{step}\t{task}\t{l}\t{v:.6}\n"));
        }
        s
    }
}

/// A backbone with one task's heads and their optimizers.
#[derive(Clone, Debug)]
pub struct Finetuner {
    pub model: MomeModel<f32>,
    pub heads: Heads<f32>,
    pub cfg: FtConfig,
    opt_model: AdamState<f32>,
    opt_heads: AdamState<f32>,
}

struct Forward {
    loss: Var,
    predictions: Vec<usize>,
    correct: usize,
    total: usize,
}

fn predictions(logits: &[f32], classes: usize) -> Vec<usize> {
    logits.chunks(classes).map(argmax).collect()
}

fn count_correct(pred: &[usize], targets: &[usize]) -> usize {
    pred.iter().zip(targets).filter(|(p, t)| p == t).count()
}

impl Finetuner {
    pub fn new(mut model: MomeModel<f32>, heads: Heads<f32>, cfg: FtConfig) -> Result<Self> {
        if heads.width != model.cfg.width {
            return Err(Error::Config("head width differs from the backbone".into()));
        }
        if cfg.batch < 2 {
            return Err(Error::Config("finetune batch must hold at least two examples".into()));
        }
        model.cfg.drop_path_rate = cfg.drop_path;
        let opt_model = AdamState::new(&model.params);
        let opt_heads = AdamState::new(&heads.params);
        Ok(Self {
            model,
            heads,
            cfg,
            opt_model,
            opt_heads,
        })
    }

    pub fn task(&self) -> FtTask {
        self.heads.task
    }

    pub fn step(&self) -> u64 {
        self.opt_model.step
    }

    /// Training-set indices of update `step`; retrieval batches hold
    /// distinct captions so every off-diagonal pair is a true negative.
    fn batch_indices(&self, data: &[FtExample], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let b = self.cfg.batch.min(data.len());
        if self.task() != FtTask::Retrieval {
            return (0..b).map(|_| rng.random_range(0..data.len())).collect();
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(b);
        for _ in 0..64 * b {
            if out.len() == b {
                break;
            }
            let i = rng.random_range(0..data.len());
            if let FtExample::Pair { caption, .. } = &data[i] {
                if seen.insert(caption.as_str()) {
                    out.push(i);
                }
            }
        }
        out
    }

    fn forward(&self, tape: &mut Tape<f32>, ctx: &FtContext, batch: &[&FtExample], rng: &mut ChaCha8Rng) -> Result<Forward> {
        let mismatch = || Error::Contract(format!("example does not belong to {}", self.task()));
        match self.task() {
            FtTask::Vqa => {
                let mut pairs = Vec::new();
                let mut targets = Vec::new();
                for ex in batch {
                    let FtExample::Vqa { image, question, answer } = ex else { return Err(mismatch()) };
                    pairs.push((image, question));
                    targets.push(*answer);
                }
                let logits = fusion_classify(tape, ctx, &pairs, rng)?;
                classify(tape, logits, &targets)
            }
            FtTask::Nlvr => {
                let mut triples = Vec::new();
                let mut targets = Vec::new();
                for ex in batch {
                    let FtExample::Nlvr { left, right, statement, label } = ex else { return Err(mismatch()) };
                    triples.push((left, right, statement));
                    targets.push(*label);
                }
                let logits = nlvr_forward(tape, ctx, &triples, rng)?;
                classify(tape, logits, &targets)
            }
            FtTask::ImgCls => {
                let mut images = Vec::new();
                let mut targets = Vec::new();
                for ex in batch {
                    let FtExample::ImgCls { image, label } = ex else { return Err(mismatch()) };
                    images.push(image);
                    targets.push(*label);
                }
                let logits = avgpool_classify(tape, ctx, &images, rng)?;
                classify(tape, logits, &targets)
            }
            FtTask::Retrieval => {
                let mut images = Vec::new();
                let mut texts = Vec::new();
                for ex in batch {
                    let FtExample::Pair { image, text, .. } = ex else { return Err(mismatch()) };
                    images.push(image);
                    texts.push(text);
                }
                retrieval_loss(tape, ctx, &images, &texts, rng)
            }
        }
    }

    /// One update of backbone and heads on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[FtExample]) -> Result<FtReport> {
        if data.is_empty() {
            return Err(Error::Contract("finetuning on an empty training set".into()));
        }
        let step = self.step() + 1;
        let mut rng = step_rng(self.cfg.train_seed, step);
        let idx = self.batch_indices(data, &mut rng);
        let batch: Vec<&FtExample> = idx.iter().map(|&i| &data[i]).collect();
        self.model.params.zero_grad();
        self.heads.params.zero_grad();
        let mut tape = Tape::new();
        let mv = self.model.bind(&mut tape);
        let hv = self.heads.bind(&mut tape);
        let ctx = FtContext {
            model: &self.model.cfg,
            vars: &mv,
            heads: &hv,
            training: true,
        };
        let f = self.forward(&mut tape, &ctx, &batch, &mut rng)?;
        let loss = tape.scalar(f.loss) as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("{} loss is {loss} at step {step}", self.task())));
        }
        tape.backward(f.loss)?;
        self.model.params.accumulate_grads(&tape, &mv.bound)?;
        self.heads.params.accumulate_grads(&tape, &hv.bound)?;
        drop(tape);
        let lr = lr_at_step(step as usize, self.cfg.peak_lr, self.cfg.warmup, self.cfg.steps);
        adam_step(&mut self.model.params, &mut self.opt_model, lr, &self.cfg.adam)?;
        adam_step(&mut self.heads.params, &mut self.opt_heads, lr, &self.cfg.adam)?;
        Ok(FtReport {
            step,
            lr,
            loss,
            correct: f.correct,
            total: f.total,
        })
    }

    fn with_inference<O>(&self, f: impl FnOnce(&mut Tape<f32>, &FtContext, &mut ChaCha8Rng) -> Result<O>) -> Result<O> {
        let mut tape = Tape::inference();
        let mv = self.model.bind(&mut tape);
        let hv = self.heads.bind(&mut tape);
        let ctx = FtContext {
            model: &self.model.cfg,
            vars: &mv,
            heads: &hv,
            training: false,
        };
        f(&mut tape, &ctx, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Held-out metrics: accuracy and loss for the classification tasks;
    /// two-stage recall for retrieval.
    pub fn evaluate(&self, data: &[FtExample]) -> Result<EvalReport> {
        if data.is_empty() {
            return Err(Error::Contract("evaluation on an empty set".into()));
        }
        if self.task() == FtTask::Retrieval {
            return self.evaluate_retrieval(data);
        }
        let (loss, pred) = self.predict(data)?;
        let correct = count_correct(&pred, &data.iter().map(label).collect::<Vec<_>>());
        let n = data.len() as f64;
        Ok(EvalReport {
            task: self.task().name().into(),
            metrics: vec![("loss".into(), loss), ("accuracy".into(), correct as f64 / n)],
        })
    }

    /// Mean loss and predicted class of every example of a classification task.
    pub fn predict(&self, data: &[FtExample]) -> Result<(f64, Vec<usize>)> {
        if self.task() == FtTask::Retrieval {
            return Err(Error::Contract("retrieval has no class predictions".into()));
        }
        let mut loss = 0.0;
        let mut pred = Vec::with_capacity(data.len());
        for chunk in data.chunks(32) {
            let refs: Vec<&FtExample> = chunk.iter().collect();
            let (l, p) = self.with_inference(|tape, ctx, rng| {
                let f = self.forward(tape, ctx, &refs, rng)?;
                Ok((tape.scalar(f.loss) as f64, f.predictions))
            })?;
            loss += l * chunk.len() as f64;
            pred.extend(p);
        }
        Ok((loss / data.len().max(1) as f64, pred))
    }

    /// Dual-encoder index of a retrieval corpus.
    pub fn build_index(&self, data: &[FtExample]) -> Result<RetrievalIndex> {
        let mut images = Vec::new();
        let mut texts = Vec::new();
        for chunk in data.chunks(64) {
            let mut gi = Vec::new();
            let mut tt = Vec::new();
            for ex in chunk {
                let FtExample::Pair { image, text, .. } = ex else {
                    return Err(Error::Contract("retrieval corpus holds image-text pairs".into()));
                };
                gi.push(image);
                tt.push(text);
            }
            self.with_inference(|tape, ctx, rng| {
                let ei = embed_images(tape, ctx, &gi, rng)?;
                images.extend_from_slice(tape.value(ei));
                let et = embed_texts(tape, ctx, &tt, rng)?;
                texts.extend_from_slice(tape.value(et));
                Ok(())
            })?;
        }
        RetrievalIndex::new(self.heads.embed_dim, images, texts)
    }

    /// ITM match probability of each `(image, text)` pair.
    pub fn match_scores(&self, pairs: &[(&PatchGrid, &TextTokens)]) -> Result<Vec<f64>> {
        self.with_inference(|tape, ctx, rng| {
            let logits = itm_logits(tape, ctx, pairs, rng)?;
            Ok(tape
                .value(logits)
                .chunks(2)
                .map(|z| {
                    let (a, b) = (z[0] as f64, z[1] as f64);
                    1.0 / (1.0 + (a - b).exp())
                })
                .collect())
        })
    }

    /// Two-stage ranking for every query of a corpus in one direction.
    pub fn rerank_all(&self, data: &[FtExample], index: &RetrievalIndex, dir: Direction, k: usize) -> Result<Vec<Vec<usize>>> {
        let pair = |i: usize| match &data[i] {
            FtExample::Pair { image, text, .. } => Ok((image, text)),
            _ => Err(Error::Contract("retrieval corpus holds image-text pairs".into())),
        };
        let mut out = Vec::with_capacity(data.len());
        for q in 0..data.len() {
            let (cands, pairs) = match dir {
                Direction::TextToImage => {
                    let c = index.images_for(index.text(q), k)?;
                    let text = pair(q)?.1;
                    let p = c.iter().map(|&j| Ok((pair(j)?.0, text))).collect::<Result<Vec<_>>>()?;
                    (c, p)
                }
                Direction::ImageToText => {
                    let c = index.texts_for(index.image(q), k)?;
                    let image = pair(q)?.0;
                    let p = c.iter().map(|&j| Ok((image, pair(j)?.1))).collect::<Result<Vec<_>>>()?;
                    (c, p)
                }
            };
            let scores = self.match_scores(&pairs)?;
            out.push(rerank(&cands, &scores)?);
        }
        Ok(out)
    }

    fn evaluate_retrieval(&self, data: &[FtExample]) -> Result<EvalReport> {
        let index = self.build_index(data)?;
        let k = self.cfg.rerank_k.min(data.len());
        let gold: Vec<usize> = (0..data.len()).collect();
        let mut metrics = Vec::new();
        for (dir, name) in [(Direction::TextToImage, "ir"), (Direction::ImageToText, "tr")] {
            let dual: Vec<Vec<usize>> = (0..data.len())
                .map(|q| match dir {
                    Direction::TextToImage => index.images_for(index.text(q), 1),
                    Direction::ImageToText => index.texts_for(index.image(q), 1),
                })
                .collect::<Result<_>>()?;
            let ranked = self.rerank_all(data, &index, dir, k)?;
            metrics.push((format!("{name}_r1"), recall_at_k(&ranked, &gold, 1)?));
            metrics.push((format!("{name}_r{k}"), recall_at_k(&ranked, &gold, k)?));
            metrics.push((format!("{name}_dual_r1"), recall_at_k(&dual, &gold, 1)?));
        }
        Ok(EvalReport {
            task: FtTask::Retrieval.name().into(),
            metrics,
        })
    }
}

/// Gold class of a classification example.
pub fn label(ex: &FtExample) -> usize {
    match ex {
        FtExample::Vqa { answer, .. } => *answer,
        FtExample::Nlvr { label, .. } | FtExample::ImgCls { label, .. } => *label,
        FtExample::Pair { .. } => 0,
    }
}

fn classify(tape: &mut Tape<f32>, logits: Var, targets: &[usize]) -> Result<Forward> {
    let loss = tape.cross_entropy(logits, targets)?;
    let pred = predictions(tape.value(logits), tape.shape(logits)[1]);
    Ok(Forward {
        loss,
        correct: count_correct(&pred, targets),
        predictions: pred,
        total: targets.len(),
    })
}

/// ITC plus ITM with one hard negative per text and per image.
fn retrieval_loss(
    tape: &mut Tape<f32>,
    ctx: &FtContext,
    images: &[&PatchGrid],
    texts: &[&TextTokens],
    rng: &mut ChaCha8Rng,
) -> Result<Forward> {
    let b = images.len();
    if b < 2 {
        return Err(Error::Contract("retrieval finetuning needs at least two pairs".into()));
    }
    let log_scale = ctx
        .heads
        .log_scale
        .ok_or_else(|| Error::Contract("contrastive scale is not present".into()))?;
    let ei = embed_images(tape, ctx, images, rng)?;
    let et = embed_texts(tape, ctx, texts, rng)?;
    let (itc, s) = itc_loss(tape, et, ei, log_scale)?;
    let sims: Vec<f64> = tape.value(s).iter().map(|&x| x as f64).collect();

    let mut pairs: Vec<(&PatchGrid, &TextTokens)> = (0..b).map(|i| (images[i], texts[i])).collect();
    let mut targets = vec![1; b];
    for i in 0..b {
        let p = hard_negative_probs(&sims, b, i, Direction::TextToImage)?;
        pairs.push((images[sample_hard_negative(&p, rng)?], texts[i]));
    }
    for j in 0..b {
        let p = hard_negative_probs(&sims, b, j, Direction::ImageToText)?;
        pairs.push((images[j], texts[sample_hard_negative(&p, rng)?]));
    }
    targets.extend(std::iter::repeat_n(0, 2 * b));
    let logits = itm_logits(tape, ctx, &pairs, rng)?;
    let itm = tape.cross_entropy(logits, &targets)?;
    let pred = predictions(tape.value(logits), 2);
    Ok(Forward {
        loss: tape.add(itc, itm)?,
        correct: count_correct(&pred, &targets),
        predictions: pred,
        total: targets.len(),
    })
}
