//! Pair-wise training of the co-segmentation network.

mod optim;

pub use optim::{adam_step, poly_lr, sgd_step, OptimizerConfig, OptimizerKind, OptimizerState, PolySchedule};

use std::fs::OpenOptions;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cosegnet::CoSegNet;
use crate::metrics;
use crate::nn::{Grads, Tape, Tensor, BCE_CLAMP};
use crate::parallel::Exec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Image pairs per step; 10 pairs = 20 images.
    pub pairs_per_batch: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub rng_seed: u64,
    /// Checkpoint interval in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { pairs_per_batch: 10, epochs: 2, iters_per_epoch: 12000, rng_seed: 0, checkpoint_every: 1000 }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_batch == 0 || self.epochs == 0 || self.iters_per_epoch == 0 {
            return Err(Error::Config("pairs_per_batch, epochs and iters_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

/// One preprocessed image with its binary training target, both `(1, H, W)`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn new(image: &Array2<f64>, mask: &Array2<bool>) -> Result<Self> {
        if image.dim() != mask.dim() {
            return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.dim(), mask.dim())));
        }
        Ok(Self { image: Tensor::from_image(image), mask: Tensor::from_image(&mask.mapv(|m| m as u8 as f64)) })
    }
}

/// Mean BCE over all pixels of both images, predictions clamped.
pub fn pair_loss(pa: &Array2<f64>, pb: &Array2<f64>, ma: &Array2<f64>, mb: &Array2<f64>) -> Result<f64> {
    if pa.dim() != ma.dim() || pb.dim() != mb.dim() {
        return Err(Error::Shape("pair_loss prediction and mask shapes differ".into()));
    }
    let mut sum = 0.0;
    for (p, m) in pa.iter().zip(ma).chain(pb.iter().zip(mb)) {
        if *m != 0.0 && *m != 1.0 {
            return Err(Error::Invalid(format!("mask value {m} is not binary")));
        }
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
    }
    Ok(sum / (pa.len() + pb.len()) as f64)
}

/// Loss and parameter gradients for one pair.
pub fn pair_gradients(model: &CoSegNet, a: &Sample, b: &Sample) -> Result<(f64, Grads)> {
    let mut tape = Tape::new(model.params());
    let (va, vb) = (tape.input(a.image.clone()), tape.input(b.image.clone()));
    let (pa, pb) = model.forward_pair_on(&mut tape, va, vb)?;
    if tape.shape(pa) != a.mask.shape() || tape.shape(pb) != b.mask.shape() {
        return Err(Error::Shape("prediction and mask shapes differ".into()));
    }
    let la = tape.bce(pa, &a.mask)?;
    let lb = tape.bce(pb, &b.mask)?;
    let sum = tape.add(la, lb)?;
    let loss = tape.scale_const(sum, 0.5);
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.params))
}

/// Deterministic batch stream: passes over the pair list in a freshly
/// shuffled order each pass, addressed by iteration number.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self { n, batch, seed, cached: None }
    }

    fn permutation(&mut self, pass: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(pass) {
            let mut order: Vec<usize> = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (pass as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
            self.cached = Some((pass, order));
        }
        &self.cached.as_ref().expect("filled above").1
    }

    /// Pair indices for iteration `iter`.
    pub fn batch(&mut self, iter: usize) -> Vec<usize> {
        (0..self.batch)
            .map(|k| {
                let q = iter * self.batch + k;
                let (pass, pos) = (q / self.n, q % self.n);
                self.permutation(pass)[pos]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Where training stands; `next_iter` is the next iteration to run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub next_iter: usize,
    pub optimizer: OptimizerState,
}

pub struct Trainer<'a> {
    pub opt: &'a OptimizerConfig,
    pub tc: &'a TrainConfig,
    pub exec: Exec,
}

impl Trainer<'_> {
    pub fn learning_rate(&self, iter: usize) -> f64 {
        match self.opt.kind {
            OptimizerKind::Sgd => poly_lr(
                &PolySchedule { lr0: self.opt.sgd_lr0, power: self.opt.poly_power, total_iters: self.tc.total_iters() },
                iter,
            ),
            OptimizerKind::Adam => self.opt.adam_lr,
        }
    }

    /// Runs iterations from `state.next_iter` up to the configured total.
    /// `observer` sees every record and the updated model after each step.
    pub fn run(
        &self,
        model: &mut CoSegNet,
        samples: &[Sample],
        pairs: &[(usize, usize)],
        state: Option<TrainState>,
        observer: &mut dyn FnMut(&IterRecord, &CoSegNet, &TrainState) -> Result<()>,
    ) -> Result<TrainState> {
        self.opt.validate()?;
        self.tc.validate()?;
        if pairs.is_empty() {
            return Err(Error::Invalid("training needs at least one pair".into()));
        }
        if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= samples.len() || *b >= samples.len()) {
            return Err(Error::Invalid(format!("pair ({a}, {b}) references a missing sample")));
        }
        let mut state = state.unwrap_or_else(|| TrainState {
            next_iter: 0,
            optimizer: OptimizerState::new(self.opt.kind, model.params()),
        });
        if state.optimizer.kind() != self.opt.kind {
            return Err(Error::Config("resumed optimizer state does not match the configured optimizer".into()));
        }
        let mut sampler = BatchSampler::new(pairs.len(), self.tc.pairs_per_batch, self.tc.rng_seed);
        for iter in state.next_iter..self.tc.total_iters() {
            let batch = sampler.batch(iter);
            let results = self.exec.map(&batch, |&p| {
                let (a, b) = pairs[p];
                pair_gradients(model, &samples[a], &samples[b])
            });
            let mut total = Grads::zeros_like(model.params());
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                total.accumulate(&g);
            }
            let n = batch.len() as f64;
            loss /= n;
            total.scale(1.0 / n);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} at iteration {iter}")));
            }
            let lr = self.learning_rate(iter);
            state.optimizer.step(model.params_mut(), &total.tensors, lr, self.opt)?;
            state.next_iter = iter + 1;
            observer(&IterRecord { iter, lr, loss }, model, &state)?;
        }
        Ok(state)
    }
}

/// Mean Dice of thresholded predictions over every image slot of `pairs`.
pub fn mean_pair_dice(model: &CoSegNet, samples: &[Sample], pairs: &[(usize, usize)], exec: Exec) -> Result<f64> {
    let per_pair = exec.map(pairs, |&(a, b)| -> Result<[f64; 2]> {
        let (pa, pb) = model.forward_pair(&samples[a].image, &samples[b].image)?;
        let mut out = [0.0; 2];
        for (k, (p, s)) in [(pa, &samples[a]), (pb, &samples[b])].into_iter().enumerate() {
            let pred = p.to_image()?.mapv(|v| v >= 0.5);
            let gt = s.mask.to_image()?.mapv(|v| v > 0.5);
            out[k] = metrics::dice(&metrics::confusion(&pred, &gt)?);
        }
        Ok(out)
    });
    let mut sum = 0.0;
    for r in per_pair {
        let [a, b] = r?;
        sum += a + b;
    }
    Ok(sum / (2 * pairs.len()) as f64)
}

/// Appends `iter,lr,loss` rows, writing the header when the file is new.
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
    path: std::path::PathBuf,
}

impl LossLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer
                .write_record(["iter", "lr", "loss"])
                .map_err(|e| Error::Csv { path: path.to_path_buf(), source: e })?;
        }
        Ok(Self { writer, path: path.to_path_buf() })
    }

    pub fn write(&mut self, r: &IterRecord) -> Result<()> {
        self.writer
            .write_record([r.iter.to_string(), format!("{:e}", r.lr), format!("{:e}", r.loss)])
            .map_err(|e| Error::Csv { path: self.path.clone(), source: e })?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cosegnet::{EncoderConfig, ModelConfig};
    use rand::Rng;

    #[test]
    fn pair_loss_examples() {
        let m = Array2::from_shape_fn((4, 4), |(y, x)| ((x + y) % 2) as f64);
        let n = m.mapv(|v| 1.0 - v);
        assert!(pair_loss(&m, &n, &m, &n).unwrap() < 1e-5);
        let half = Array2::from_elem((4, 4), 0.5);
        assert!((pair_loss(&half, &half, &m, &n).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pa = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let pb = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>());
        let ab = pair_loss(&pa, &pb, &m, &n).unwrap();
        let ba = pair_loss(&pb, &pa, &n, &m).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(pair_loss(&pa, &pb, &half, &n).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_covers_passes() {
        let mut s = BatchSampler::new(7, 3, 5);
        let seq: Vec<usize> = (0..7).flat_map(|i| s.batch(i)).collect();
        for pass in seq.chunks(7) {
            let mut p = pass.to_vec();
            p.sort();
            assert_eq!(p, (0..7).collect::<Vec<_>>());
        }
        let mut fresh = BatchSampler::new(7, 3, 5);
        assert_eq!(fresh.batch(4), seq[12..15].to_vec());
    }

    fn tiny_setup() -> (CoSegNet, Vec<Sample>, Vec<(usize, usize)>) {
        let model = CoSegNet::new(ModelConfig {
            input_size: 16,
            encoder: EncoderConfig { stage_channels: vec![2, 4, 4, 8], units_per_stage: 1, ..Default::default() },
            ..Default::default()
        })
        .unwrap();
        let samples = (0..3)
            .map(|k| {
                let mask = Array2::from_shape_fn((16, 16), |(y, x)| (y as f64 - 8.0).hypot(x as f64 - 7.0 - k as f64) < 4.0);
                let img = mask.mapv(|m| if m { 0.8 } else { 0.2 });
                Sample::new(&img, &mask).unwrap()
            })
            .collect();
        (model, samples, vec![(0, 1), (0, 2), (1, 2)])
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let opt = OptimizerConfig { sgd_lr0: 0.05, momentum: 0.9, ..Default::default() };
        let tc = TrainConfig { pairs_per_batch: 2, epochs: 2, iters_per_epoch: 3, rng_seed: 4, checkpoint_every: 0 };
        let run = |exec: Exec| {
            let (mut model, samples, pairs) = tiny_setup();
            let mut log = Vec::new();
            Trainer { opt: &opt, tc: &tc, exec }
                .run(&mut model, &samples, &pairs, None, &mut |r, _, _| {
                    log.push(*r);
                    Ok(())
                })
                .unwrap();
            (log, model)
        };
        let (a, ma) = run(Exec::Sequential);
        let (b, _) = run(Exec::Sequential);
        let (c, _) = run(Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].lr, 0.05);
        assert!((a[0].loss - std::f64::consts::LN_2).abs() < 0.2);

        let (mut model, samples, pairs) = tiny_setup();
        let short = TrainConfig { epochs: 1, ..tc.clone() };
        let mut first = Vec::new();
        let trainer = Trainer { opt: &opt, tc: &short, exec: Exec::Sequential };
        let state = trainer
            .run(&mut model, &samples, &pairs, None, &mut |r, _, _| {
                first.push(*r);
                Ok(())
            })
            .unwrap();
        assert_eq!(state.next_iter, 3);
        let mut rest = Vec::new();
        Trainer { opt: &opt, tc: &tc, exec: Exec::Sequential }
            .run(&mut model, &samples, &pairs, Some(state), &mut |r, _, _| {
                rest.push(*r);
                Ok(())
            })
            .unwrap();
        assert_eq!(rest.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![3, 4, 5]);
        // Learning rates differ in the first run because the total changed.
        assert_eq!(first.len() + rest.len(), 6);
        for (x, y) in model.params().tensors().iter().zip(ma.params().tensors()) {
            assert_eq!(x.shape(), y.shape());
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (mut model, samples, _) = tiny_setup();
        let opt = OptimizerConfig::default();
        let tc = TrainConfig::default();
        let r = Trainer { opt: &opt, tc: &tc, exec: Exec::Sequential }.run(&mut model, &samples, &[], None, &mut |_, _, _| Ok(()));
        assert!(r.is_err());
    }

    #[test]
    fn loss_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let mut log = LossLog::open(&p, false).unwrap();
        log.write(&IterRecord { iter: 0, lr: 0.01, loss: 0.7 }).unwrap();
        drop(log);
        let mut log = LossLog::open(&p, true).unwrap();
        log.write(&IterRecord { iter: 1, lr: 0.009, loss: 0.6 }).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "iter,lr,loss");
        assert!(lines[2].starts_with("1,"));
    }
}
