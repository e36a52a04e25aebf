use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use super::{cross_entropy, lr_at, one_hot, AdamW, TrainConfig, TrainError};
use crate::data::sample_lambda;
use crate::data::{normalize, normalize_and_jitter, pointmix, DomainDataset, IndexPlan, PointCloud, Slot};
use crate::model::{ForwardTrace, GroupInput, Mode, Model};
use crate::msd::tau_at;
use crate::params::{Binding, Gradients};
use crate::rng::{stream, tag};
use crate::scfa::{select_partner, PairingMode, Partner};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub mean_mask: f64,
    pub lr: f64,
    pub tau: f64,
    pub steps: usize,
    pub samples: usize,
}

struct SlotOutcome {
    loss: f64,
    grads: Gradients,
    mask_sum: f64,
    members: usize,
    sample_ids: Vec<String>,
}

/// Cloud `member` of `slot`, normalized and jittered.
fn prepare(
    sources: &[&DomainDataset],
    slot: &Slot,
    member: usize,
    cfg: &TrainConfig,
    path: &[u64],
) -> Result<PointCloud, TrainError> {
    let r = slot.members[member];
    let cloud = &sources[r.source].clouds[r.index];
    Ok(normalize_and_jitter(cloud, true, cfg.jitter(), &mut stream(cfg.seed, path))?)
}

#[allow(clippy::too_many_arguments)]
fn slot_step(
    model: &Model,
    sources: &[&DomainDataset],
    plan: &IndexPlan,
    slot_idx: usize,
    mix: Option<(usize, f64)>,
    cfg: &TrainConfig,
    run: u64,
    epoch: usize,
    tau: f64,
    batch_members: usize,
) -> Result<SlotOutcome, TrainError> {
    let slot = &plan.slots[slot_idx];
    let classes = model.config.num_classes;
    let (e, s) = (epoch as u64, slot_idx as u64);
    let mut clouds = Vec::with_capacity(slot.members.len() + 1);
    let mut labels = Vec::with_capacity(slot.members.len());
    for m in 0..slot.members.len() {
        let a = prepare(sources, slot, m, cfg, &[run, tag::SAMPLE, e, s, m as u64])?;
        let label_a = one_hot(a.class_id, classes);
        let other = mix.and_then(|(j, lambda)| {
            let partner_slot = &plan.slots[j];
            let src = slot.members[m].source;
            partner_slot.members.iter().position(|r| r.source == src).map(|k| (partner_slot, k, j, lambda))
        });
        match other {
            Some((ps, k, j, lambda)) => {
                let b = prepare(sources, ps, k, cfg, &[run, tag::SAMPLE, e, j as u64, k as u64])?;
                let (mixed, label) = pointmix(&a, &b, lambda, &label_a, &one_hot(b.class_id, classes));
                clouds.push(mixed);
                labels.push(label);
            }
            None => {
                clouds.push(a);
                labels.push(label_a);
            }
        }
    }
    let mut partners = Vec::with_capacity(slot.members.len());
    for m in 0..slot.members.len() {
        let mut prng = stream(cfg.seed, &[run, tag::PARTNER, e, s, m as u64]);
        partners.push(match select_partner(slot, m, PairingMode::Train, &mut prng) {
            Partner::Member(j) => j,
            Partner::SelfPair => m,
            Partner::Fallback => {
                if clouds.len() == slot.members.len() {
                    let fb = slot.fallback_partner.expect("fallback partner");
                    let cloud = &sources[fb.source].clouds[fb.index];
                    let mut r = stream(cfg.seed, &[run, tag::SAMPLE, e, s, u64::MAX]);
                    clouds.push(normalize_and_jitter(cloud, true, cfg.jitter(), &mut r)?);
                }
                slot.members.len()
            }
        });
    }
    let mut srng = stream(cfg.seed, &[run, tag::SAMPLE, e, s, u64::MAX - 1]);
    let starts: Vec<usize> = clouds.iter().map(|c| srng.random_range(0..c.len())).collect();
    let input = GroupInput {
        clouds: clouds.iter().map(|c| c.points.as_slice()).collect(),
        starts,
        outputs: (0..slot.members.len()).collect(),
        partners,
    };
    let bind = Binding::trainable(&model.store);
    let out = model.forward_group(&bind, &input, Mode::Train, tau, &mut stream(cfg.seed, &[run, tag::BATCH, e, s]))?;
    let n = slot.members.len();
    let weight = n as f64 / batch_members as f64;
    let mut loss = cross_entropy(&out.logits, &labels)?.scale(weight);
    if cfg.mask_sparsity > 0.0 {
        if let Some(p) = &out.mask_penalty {
            loss = loss.add(&p.scale(cfg.mask_sparsity / batch_members as f64))?;
        }
    }
    loss.backward()?;
    Ok(SlotOutcome {
        loss: loss.item(),
        grads: bind.gradients(),
        mask_sum: out.mask_means[..n].iter().sum(),
        members: n,
        sample_ids: clouds.iter().map(|c| c.sample_id.clone()).collect(),
    })
}

/// One pass over the balanced plan. `run` keys the random streams so that
/// different protocol runs draw independently.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut AdamW,
    sources: &[&DomainDataset],
    plan: &IndexPlan,
    cfg: &TrainConfig,
    run: u64,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    let lr = lr_at(epoch, cfg);
    let tau = tau_at(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end);
    let mut order: Vec<usize> = (0..plan.slots.len()).collect();
    order.shuffle(&mut stream(cfg.seed, &[run, tag::SHUFFLE, epoch as u64]));
    let (mut loss_sum, mut mask_sum, mut samples, mut steps) = (0.0, 0.0, 0usize, 0usize);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut brng = stream(cfg.seed, &[run, tag::SHUFFLE, epoch as u64, b as u64 + 1]);
        let mixing = brng.random::<f64>() < cfg.pointmix_prob;
        let mixes: Vec<Option<(usize, f64)>> = if mixing {
            let mut perm = batch.to_vec();
            perm.shuffle(&mut brng);
            perm.iter().map(|&j| Some((j, sample_lambda(&mut brng)))).collect()
        } else {
            vec![None; batch.len()]
        };
        let batch_members: usize = batch.iter().map(|&i| plan.slots[i].members.len()).sum();
        let shared: &Model = model;
        let outcomes: Vec<Result<SlotOutcome, TrainError>> = batch
            .par_iter()
            .zip(&mixes)
            .map(|(&i, &mix)| slot_step(shared, sources, plan, i, mix, cfg, run, epoch, tau, batch_members))
            .collect();
        let mut grads = Gradients::empty(model.store.len());
        let mut batch_loss = 0.0;
        let mut ids = Vec::new();
        for o in outcomes {
            let o = o?;
            grads.accumulate(&o.grads);
            batch_loss += o.loss;
            mask_sum += o.mask_sum;
            samples += o.members;
            ids.extend(o.sample_ids);
        }
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: b, samples: ids });
        }
        optimizer.step(&mut model.store, &grads, lr, cfg.weight_decay)?;
        loss_sum += batch_loss * batch_members as f64;
        steps += 1;
        debug!("epoch {epoch} batch {b}: loss {batch_loss:.5}");
    }
    let denom = samples.max(1) as f64;
    Ok(EpochStats { loss: loss_sum / denom, mean_mask: mask_sum / denom, lr, tau, steps, samples })
}

/// Per-sample inference output.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    pub mask_mean: f64,
    pub trace: ForwardTrace,
}

/// Anything that can label one cloud at a time.
pub trait Classifier: Sync {
    fn classify(&self, cloud: &PointCloud) -> Result<Prediction, TrainError>;
}

impl Classifier for Model {
    fn classify(&self, cloud: &PointCloud) -> Result<Prediction, TrainError> {
        let points = normalize(&cloud.points, &cloud.sample_id)?;
        let out = self.infer(&points)?;
        Ok(Prediction {
            logits: out.logits.data().to_vec(),
            features: out.pooled.data().to_vec(),
            mask_mean: out.mask_means[0],
            trace: out.trace,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub sample_id: String,
    pub class_id: usize,
    pub predicted: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub loss: f64,
    pub mean_mask: f64,
    pub rows: Vec<FeatureRow>,
    /// Every forward ran in infer mode, drew no noise and read only the
    /// sample's own features.
    pub isolated: bool,
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &DomainDataset) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Protocol(format!("{} {} split is empty", data.domain_name, data.split)));
    }
    let preds: Vec<Prediction> =
        data.clouds.par_iter().map(|c| model.classify(c)).collect::<Result<_, TrainError>>()?;
    let classes = preds[0].logits.len();
    let (mut correct, mut loss, mut mask) = (0usize, 0.0, 0.0);
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let mut rows = Vec::with_capacity(preds.len());
    let mut isolated = true;
    for (c, p) in data.clouds.iter().zip(preds) {
        let pred = argmax(&p.logits);
        let mx = p.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + p.logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        loss += -(p.logits[c.class_id] - lse).max(super::LOG_FLOOR.ln());
        mask += p.mask_mean;
        totals[c.class_id] += 1;
        if pred == c.class_id {
            correct += 1;
            hits[c.class_id] += 1;
        }
        isolated &= !p.trace.train && !p.trace.mask_noise_drawn && p.trace.feature_reads.iter().all(|&(o, r)| o == r);
        rows.push(FeatureRow { sample_id: c.sample_id.clone(), class_id: c.class_id, predicted: pred, features: p.features });
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        per_class: hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect(),
        loss: loss / n,
        mean_mask: mask / n,
        rows,
        isolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{balanced_resample, Split};
    use crate::model::ModelConfig;
    use crate::ssm::{Scale, StageConfig};

    struct Oracle;

    impl Classifier for Oracle {
        fn classify(&self, cloud: &PointCloud) -> Result<Prediction, TrainError> {
            Ok(Prediction {
                logits: one_hot(cloud.class_id, 3),
                features: vec![cloud.class_id as f64],
                mask_mean: 1.0,
                trace: ForwardTrace::default(),
            })
        }
    }

    fn blob(class: usize, domain: usize, i: usize) -> PointCloud {
        let points = (0..96)
            .map(|k| {
                let t = k as f64 * 0.3 + i as f64;
                let r = 1.0 + class as f64;
                [r * t.cos(), r * t.sin() * (1.0 + 0.1 * domain as f64), (k % 7) as f64 * 0.1 * (class + 1) as f64]
            })
            .collect();
        PointCloud { points, class_id: class, domain_id: domain, sample_id: format!("d{domain}-c{class}-{i}") }
    }

    fn dataset(domain: usize, per_class: usize) -> DomainDataset {
        let clouds = (0..3).flat_map(|c| (0..per_class).map(move |i| blob(c, domain, i))).collect();
        DomainDataset::new(domain, format!("d{domain}"), Split::Train, clouds, 3)
    }

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig { epochs: 4, warmup_epochs: 1, batch_size: 2, lr_init: 3e-3, lr_final: 1e-3, ..Default::default() };
        cfg.width = Some(8);
        cfg.num_stages = Some(2);
        cfg.state = Some(4);
        cfg.groups = 6;
        cfg.neighbors = 4;
        cfg
    }

    #[test]
    fn oracle_scores_perfectly() {
        let r = evaluate(&Oracle, &dataset(0, 4)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn empty_split_is_protocol_error() {
        let empty = DomainDataset::new(0, "x", Split::Test, Vec::new(), 3);
        assert!(matches!(evaluate(&Oracle, &empty), Err(TrainError::Protocol(_))));
    }

    #[test]
    fn epochs_are_bitwise_reproducible_and_isolated_at_inference() {
        let cfg = small_config();
        let ds = [dataset(0, 3), dataset(1, 2)];
        let refs: Vec<&DomainDataset> = ds.iter().collect();
        let plan = balanced_resample(&refs, 3, &mut stream(1, &[tag::PLAN])).unwrap();
        let run = |cfg: &TrainConfig| {
            let mut model = Model::new(cfg.model_config(3), cfg.seed).unwrap();
            let mut opt = AdamW::new(&model.store);
            let stats: Vec<EpochStats> =
                (0..2).map(|e| train_epoch(&mut model, &mut opt, &refs, &plan, cfg, 0, e).unwrap()).collect();
            (stats, model)
        };
        let (a, ma) = run(&cfg);
        let (b, mb) = run(&cfg);
        assert_eq!(a, b);
        assert_eq!(ma.store, mb.store);
        let steps = plan.slots.len().div_ceil(cfg.batch_size);
        assert!(a.iter().all(|s| s.loss.is_finite() && s.steps == steps));
        let eval = evaluate(&ma, &ds[0]).unwrap();
        assert!(eval.isolated);
        assert_eq!(eval, evaluate(&ma, &ds[0]).unwrap());
    }

    #[test]
    fn learning_rate_follows_schedule() {
        let cfg = small_config();
        let ds = [dataset(0, 2), dataset(1, 2)];
        let refs: Vec<&DomainDataset> = ds.iter().collect();
        let plan = balanced_resample(&refs, 3, &mut stream(1, &[tag::PLAN])).unwrap();
        let mut model = Model::new(cfg.model_config(3), 0).unwrap();
        let mut opt = AdamW::new(&model.store);
        for e in 0..cfg.epochs {
            let s = train_epoch(&mut model, &mut opt, &refs, &plan, &cfg, 0, e).unwrap();
            assert_eq!(s.lr, lr_at(e, &cfg));
        }
    }

    #[test]
    fn untrained_model_sits_near_chance() {
        let mut cfg = ModelConfig::new(Scale::Tiny, 5);
        cfg.stages = StageConfig { num_stages: 2, blocks_per_stage: 1, width: 8, state: 4 };
        cfg.tokenizer.groups = 6;
        cfg.tokenizer.neighbors = 4;
        let clouds = (0..5).flat_map(|c| (0..8).map(move |i| blob(c, 0, i))).collect();
        let data = DomainDataset::new(0, "d0", Split::Test, clouds, 5);
        let accs: Vec<f64> = (0..5).map(|s| evaluate(&Model::new(cfg, s).unwrap(), &data).unwrap().accuracy).collect();
        let mean = accs.iter().sum::<f64>() / 5.0;
        assert!((0.10..=0.35).contains(&mean), "{accs:?}");
    }
}
