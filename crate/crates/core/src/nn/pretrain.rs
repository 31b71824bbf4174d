//! Generic (texture classification) and domain (slice reconstruction) pretraining.
//!
//! Both routines train the encoder together with a throwaway head, then drop
//! the head. Only the encoder's parameters are kept.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::texture::{TextureClass, TextureSample};
use super::{seeded_rng, VggEncoder};
use crate::data::{Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { epochs: 4, batch_size: 16, lr: 1e-3, seed: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericPretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub held_out_accuracy: f64,
    pub chance_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPretrainReport {
    pub epochs: usize,
    pub steps: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// A normal-dose image tagged with the patient it came from.
#[derive(Clone, Debug)]
pub struct TaggedSlice {
    pub patient_id: String,
    /// `[1, 1, H, W]`
    pub image: Tensor,
}

fn batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_loss(tape: &Tape, loss: Var, seed: u64, step: usize) -> Result<()> {
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("pretraining diverged (loss {v}) at step {step}, seed {seed}")));
    }
    Ok(())
}

struct ClassifierHead {
    params: ParamSet,
}

impl ClassifierHead {
    fn new(features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x4ead);
        let mut params = ParamSet::new();
        params.insert("head.weight", Tensor::he_uniform(&[classes, features], features, &mut rng));
        params.insert("head.bias", Tensor::zeros(&[classes]));
        ClassifierHead { params }
    }

    fn logits(&self, tape: &mut Tape, bound: &[Var], features: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, bound[0], bound[1])
    }
}

/// Trains the encoder to classify procedural textures; returns held-out accuracy.
pub fn pretrain_generic(
    encoder: &mut VggEncoder,
    train: &[TextureSample],
    held_out: &[TextureSample],
    opts: &PretrainOptions,
) -> Result<GenericPretrainReport> {
    let classes = TextureClass::ALL.len();
    let mut counts = vec![0usize; classes];
    for s in train {
        counts[s.class.label()] += 1;
    }
    if counts.contains(&0) || counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::invalid(format!("texture classes must be present and balanced, got {counts:?}")));
    }

    let mut head = ClassifierHead::new(encoder.output_channels(), classes, opts.seed);
    let adam = AdamConfig { lr: opts.lr, ..AdamConfig::default() };
    let mut enc_opt = Adam::new(adam, encoder.params());
    let mut head_opt = Adam::new(adam, &head.params);
    let mut rng = seeded_rng(opts.seed);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut step = 0;

    for _ in 0..opts.epochs {
        let mut total = 0.0;
        let order = batches(train.len(), opts.batch_size, &mut rng);
        for batch in &order {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].class.label()).collect();
            let mut tape = Tape::new();
            let enc_bound = encoder.params().bind(&mut tape, true);
            let head_bound = head.params.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let f = encoder.forward_full(&mut tape, &enc_bound, x)?;
            let logits = head.logits(&mut tape, &head_bound, f)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            step += 1;
            check_loss(&tape, loss, opts.seed, step)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            let grads = tape.backward(loss)?;
            encoder.params_mut().accumulate_grads(&enc_bound, &grads);
            head.params.accumulate_grads(&head_bound, &grads);
            enc_opt.step(encoder.params_mut())?;
            head_opt.step(&mut head.params)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }

    let mut correct = 0;
    for chunk in held_out.chunks(opts.batch_size.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let enc_bound = encoder.params().bind(&mut tape, false);
        let head_bound = head.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::stack(&images)?);
        let f = encoder.forward_full(&mut tape, &enc_bound, x)?;
        let logits = head.logits(&mut tape, &head_bound, f)?;
        let z = tape.value(logits);
        for (r, s) in chunk.iter().enumerate() {
            let row = &z.data()[r * classes..(r + 1) * classes];
            let pred = (0..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            correct += usize::from(pred == s.class.label());
        }
    }

    Ok(GenericPretrainReport {
        epochs: opts.epochs,
        steps: step,
        epoch_losses,
        held_out_accuracy: if held_out.is_empty() { 0.0 } else { correct as f64 / held_out.len() as f64 },
        chance_accuracy: 1.0 / classes as f64,
    })
}

struct Decoder {
    params: ParamSet,
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl Decoder {
    /// Four 2× upsampling stages back from the deepest block to input resolution.
    fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0xdec0);
        let mut params = ParamSet::new();
        let widths = [32, 16, 8, 8];
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut params, &format!("decoder{i}"), cin, w, 3, &mut rng);
                cin = w;
                c
            })
            .collect();
        let head = Conv2d::new(&mut params, "decoder.head", cin, 1, 1, &mut rng);
        Decoder { params, stages, head }
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], features: Var) -> Result<Var> {
        let mut h = features;
        for stage in &self.stages {
            h = tape.upsample_nearest(h, 2)?;
            h = stage.forward_relu(tape, bound, h)?;
        }
        self.head.forward(tape, bound, h)
    }
}

fn reconstruction_mse(encoder: &VggEncoder, decoder: &Decoder, slices: &[TaggedSlice], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in slices.chunks(batch.max(1)) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let enc_bound = encoder.params().bind(&mut tape, false);
        let dec_bound = decoder.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::stack(&images)?);
        let f = encoder.forward_full(&mut tape, &enc_bound, x)?;
        let r = decoder.forward(&mut tape, &dec_bound, f)?;
        let loss = tape.mse_mean(r, x)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / slices.len() as f64)
}

/// Trains the encoder as the front half of an autoencoder on normal-dose training slices.
///
/// Every slice must belong to a training-split patient.
pub fn pretrain_domain(
    encoder: &mut VggEncoder,
    slices: &[TaggedSlice],
    splits: &SplitAssignment,
    opts: &PretrainOptions,
) -> Result<DomainPretrainReport> {
    if slices.is_empty() {
        return Err(Error::invalid("domain pretraining needs at least one slice"));
    }
    for s in slices {
        match splits.split_of(&s.patient_id) {
            Some(Split::Train) => {}
            Some(other) => {
                return Err(Error::Leakage(format!(
                    "slice from {other} patient `{}` passed to domain pretraining",
                    s.patient_id
                )))
            }
            None => {
                return Err(Error::Leakage(format!(
                    "slice from unassigned patient `{}` passed to domain pretraining",
                    s.patient_id
                )))
            }
        }
    }

    let mut decoder = Decoder::new(encoder.output_channels(), opts.seed);
    let initial_mse = reconstruction_mse(encoder, &decoder, slices, opts.batch_size)?;

    let adam = AdamConfig { lr: opts.lr, ..AdamConfig::default() };
    let mut enc_opt = Adam::new(adam, encoder.params());
    let mut dec_opt = Adam::new(adam, &decoder.params);
    let mut rng = seeded_rng(opts.seed);
    let mut step = 0;
    for _ in 0..opts.epochs {
        for batch in batches(slices.len(), opts.batch_size, &mut rng) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &slices[i].image).collect();
            let mut tape = Tape::new();
            let enc_bound = encoder.params().bind(&mut tape, true);
            let dec_bound = decoder.params.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let f = encoder.forward_full(&mut tape, &enc_bound, x)?;
            let r = decoder.forward(&mut tape, &dec_bound, f)?;
            let loss = tape.mse_mean(r, x)?;
            step += 1;
            check_loss(&tape, loss, opts.seed, step)?;
            let grads = tape.backward(loss)?;
            encoder.params_mut().accumulate_grads(&enc_bound, &grads);
            decoder.params.accumulate_grads(&dec_bound, &grads);
            enc_opt.step(encoder.params_mut())?;
            dec_opt.step(&mut decoder.params)?;
        }
    }

    let final_mse = reconstruction_mse(encoder, &decoder, slices, opts.batch_size)?;
    Ok(DomainPretrainReport { epochs: opts.epochs, steps: step, initial_mse, final_mse })
}
