//! Siamese co-segmentation network: a shared dilated residual encoder,
//! pair attention on the bottleneck, and a shared decoder head.

mod attention;
mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;

pub use attention::Attention;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, OPTIMIZER_PREFIX};
pub use config::{
    eca_kernel_size, AttentionConfig, ChannelAttention, DecoderConfig, DecoderVariant, EncoderConfig, ModelConfig,
    SpatialAttention,
};
pub use decoder::Decoder;
pub use encoder::Encoder;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct CoSegNet {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    attention: Attention,
    decoder: Decoder,
}

impl CoSegNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config.encoder);
        let c = config.encoder.bottleneck_channels();
        let attention = Attention::new(&mut params, &mut rng, &config.attention, c);
        let decoder = Decoder::new(&mut params, &mut rng, &config.decoder, c, config.encoder.low_level_channels());
        Ok(Self { config, params, encoder, attention, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn attention_params(&self) -> Vec<ParamId> {
        self.attention.params()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let (c, h, w) = tape.value(x).dims3()?;
        if c != 1 {
            return Err(Error::Shape(format!("network input must have one channel, got {c}")));
        }
        if h % EncoderConfig::OUTPUT_STRIDE != 0 || w % EncoderConfig::OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by the output stride 8")));
        }
        Ok(())
    }

    /// Records `encode -> attend -> decode` for a pair on `tape`.
    pub fn forward_pair_on(&self, tape: &mut Tape, a: Var, b: Var) -> Result<(Var, Var)> {
        self.check_input(tape, a)?;
        self.check_input(tape, b)?;
        let (fa, la) = self.encoder.encode(tape, a)?;
        let (fb, lb) = self.encoder.encode(tape, b)?;
        let (fa, fb) = self.attention.apply(tape, fa, fb)?;
        let pa = self.decoder.decode(tape, fa, la)?;
        let pb = self.decoder.decode(tape, fb, lb)?;
        Ok((pa, pb))
    }

    pub fn forward_pair(&self, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new(&self.params);
        let (va, vb) = (tape.input(a.clone()), tape.input(b.clone()));
        let (pa, pb) = self.forward_pair_on(&mut tape, va, vb)?;
        Ok((tape.value(pa).clone(), tape.value(pb).clone()))
    }

    /// Probability maps for two preprocessed images.
    pub fn predict_pair(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (pa, pb) = self.forward_pair(&Tensor::from_image(a), &Tensor::from_image(b))?;
        Ok((pa.to_image()?, pb.to_image()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(attention: AttentionConfig, variant: DecoderVariant) -> ModelConfig {
        ModelConfig {
            input_size: 32,
            encoder: EncoderConfig { stage_channels: vec![4, 8, 8, 16], units_per_stage: 1, ..Default::default() },
            attention,
            decoder: DecoderConfig { variant, d2_lowlevel_channels: 4 },
            init_seed: 3,
        }
    }

    fn rand_image(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, n, n], |_| rng.random::<f64>())
    }

    fn variants() -> Vec<AttentionConfig> {
        let base = AttentionConfig { se_reduction: 4, aspp_rates: vec![1, 2], ..Default::default() };
        let mut out = vec![base.clone()];
        for channel in [ChannelAttention::Se, ChannelAttention::Eca, ChannelAttention::None] {
            for spatial in [SpatialAttention::Msa, SpatialAttention::Aspp, SpatialAttention::None] {
                out.push(AttentionConfig { channel, spatial, ..base.clone() });
            }
        }
        out.push(AttentionConfig { danet: true, ..base });
        out
    }

    #[test]
    fn shapes_and_output_stride() {
        let net = CoSegNet::new(ModelConfig::default()).unwrap();
        let store = net.params();
        let mut tape = Tape::new(store);
        let x = tape.input(rand_image(128, 1));
        let (f, l) = net.encoder().encode(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f), [128, 16, 16]);
        assert_eq!(tape.shape(l), [16, 32, 32]);
        let mg = ModelConfig {
            encoder: EncoderConfig { multi_grid: Some(vec![2, 4, 8]), ..Default::default() },
            ..ModelConfig::default()
        };
        let net = CoSegNet::new(mg).unwrap();
        assert_eq!(net.encoder().final_stage_dilations(), vec![8, 16, 32]);
        let mut tape = Tape::new(net.params());
        let x = tape.input(rand_image(64, 2));
        let (f, _) = net.encoder().encode(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f), [128, 8, 8]);
    }

    #[test]
    fn rejects_bad_input_size() {
        let net = CoSegNet::new(small(AttentionConfig::default(), DecoderVariant::D1)).unwrap();
        let err = net.forward_pair(&rand_image(20, 1), &rand_image(20, 2)).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn swap_equivariance_all_variants() {
        for att in variants() {
            for variant in [DecoderVariant::D1, DecoderVariant::D2] {
                let net = CoSegNet::new(small(att.clone(), variant)).unwrap();
                let (a, b) = (rand_image(32, 5), rand_image(32, 6));
                let (pa, pb) = net.forward_pair(&a, &b).unwrap();
                let (qb, qa) = net.forward_pair(&b, &a).unwrap();
                assert_eq!(pa.shape(), [1, 32, 32]);
                assert!(pa.max_abs_diff(&qa) < 1e-12 && pb.max_abs_diff(&qb) < 1e-12, "{att:?}");
                assert!(pa.data().iter().all(|p| *p > 0.0 && *p < 1.0));
                let (sa, sb) = net.forward_pair(&a, &a).unwrap();
                assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn zeroed_gates_are_one_half() {
        let att = AttentionConfig { channel: ChannelAttention::Se, se_reduction: 4, ..Default::default() };
        let mut net = CoSegNet::new(small(att, DecoderVariant::D1)).unwrap();
        for id in net.attention_params() {
            net.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(net.params());
        let fa = tape.input(rand_image(4, 1).reshaped(vec![16, 1, 1]).unwrap());
        let fb = tape.input(rand_image(4, 2).reshaped(vec![16, 1, 1]).unwrap());
        let g = net.attention().channel_gate(&mut tape, fa, fb).unwrap().unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
        let (a, _) = net.attention().apply(&mut tape, fa, fb).unwrap();
        for (x, y) in tape.value(fa).data().iter().zip(tape.value(a).data()) {
            assert!((0.5 * x - y).abs() < 1e-15);
        }

        let att = AttentionConfig { channel: ChannelAttention::Eca, spatial: SpatialAttention::Aspp, aspp_rates: vec![1, 2], ..Default::default() };
        let mut net = CoSegNet::new(small(att, DecoderVariant::D1)).unwrap();
        for id in net.attention_params() {
            net.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(net.params());
        let f16 = tape.input(Tensor::from_fn(&[16, 4, 4], |i| (i as f64).sin()));
        let g = net.attention().channel_gate(&mut tape, f16, f16).unwrap().unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
        let s = net.attention().spatial_map(&mut tape, f16).unwrap().unwrap();
        assert_eq!(tape.shape(s), [1, 4, 4]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn msa_examples() {
        let att = AttentionConfig { spatial: SpatialAttention::Msa, ..Default::default() };
        let net = CoSegNet::new(small(att, DecoderVariant::D1)).unwrap();
        let mut tape = Tape::new(net.params());
        let c = tape.input(Tensor::full(&[3, 4, 4], 2.0));
        let s = net.attention().spatial_map(&mut tape, c).unwrap().unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 1.0));
        let mut hot = Tensor::zeros(&[3, 4, 4]);
        hot.data_mut()[5] = 3.0;
        let h = tape.input(hot);
        let s = net.attention().spatial_map(&mut tape, h).unwrap().unwrap();
        assert_eq!(tape.value(s).data()[5], 1.0);
        assert_eq!(tape.value(s).data()[0], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Tensor::from_fn(&[5, 3, 4], |_| rng.random::<f64>());
        let v = tape.input(t.clone());
        let s = net.attention().spatial_map(&mut tape, v).unwrap().unwrap();
        let means: Vec<f64> = (0..12).map(|p| (0..5).map(|c| t.data()[c * 12 + p]).sum::<f64>() / 5.0).collect();
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (m, s) in means.iter().zip(tape.value(s).data()) {
            assert!(((m - lo) / (hi - lo) - s).abs() < 1e-7);
        }
    }

    #[test]
    fn danet_initial_output_and_toy_affinity() {
        let att = AttentionConfig { danet: true, ..Default::default() };
        let mut net = CoSegNet::new(small(att.clone(), DecoderVariant::D1)).unwrap();
        let mut tape = Tape::new(net.params());
        let fa = tape.input(Tensor::from_fn(&[16, 2, 2], |i| (i as f64 * 0.3).cos()));
        let fb = tape.input(Tensor::from_fn(&[16, 2, 2], |i| (i as f64 * 0.7).sin()));
        let (a, b) = net.attention().apply(&mut tape, fa, fb).unwrap();
        for (x, y) in tape.value(fa).data().iter().zip(tape.value(a).data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        for (x, y) in tape.value(fb).data().iter().zip(tape.value(b).data()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        drop(tape);

        // Single-channel toy with identity projections and unit residual scales.
        let mut cfg = small(att, DecoderVariant::D1);
        cfg.encoder.stage_channels = vec![1, 1, 1, 1];
        net = CoSegNet::new(cfg).unwrap();
        for (name, v) in [
            ("query", 1.0),
            ("key", 1.0),
            ("value", 1.0),
        ] {
            let w = net.params().id(&format!("attention.danet.{name}.weight")).unwrap();
            net.params_mut().get_mut(w).data_mut()[0] = v;
        }
        for g in ["gamma_p", "gamma_c"] {
            let id = net.params().id(&format!("attention.danet.{g}")).unwrap();
            net.params_mut().get_mut(id).data_mut()[0] = 1.0;
        }
        let xa = [0.1, 0.4, -0.2, 0.3];
        let xb = [0.2, -0.1, 0.5, 0.0];
        let mut tape = Tape::new(net.params());
        let fa = tape.input(Tensor::new(vec![1, 2, 2], xa.to_vec()).unwrap());
        let fb = tape.input(Tensor::new(vec![1, 2, 2], xb.to_vec()).unwrap());
        let (a, _) = net.attention().apply(&mut tape, fa, fb).unwrap();
        let g: Vec<f64> = xa.iter().zip(&xb).map(|(a, b)| a + b).collect();
        let mut expect = [0.0; 4];
        for i in 0..4 {
            let e: Vec<f64> = (0..4).map(|j| (g[i] * g[j]).exp()).collect();
            let z: f64 = e.iter().sum();
            let pos: f64 = (0..4).map(|j| e[j] / z * xa[j]).sum();
            // One channel: the channel affinity softmax is exactly 1.
            expect[i] = (pos + xa[i]) + (xa[i] + xa[i]);
        }
        for (e, v) in expect.iter().zip(tape.value(a).data()) {
            assert!((e - v).abs() < 1e-12, "{e} vs {v}");
        }
    }

    #[test]
    fn decoder_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let d2 = Decoder::new(&mut store, &mut rng, &DecoderConfig { variant: DecoderVariant::D2, d2_lowlevel_channels: 16 }, 128, 32);
        let mut tape = Tape::new(&store);
        let f = tape.input(Tensor::from_fn(&[128, 16, 16], |i| ((i % 97) as f64 * 0.01).sin()));
        let l = tape.input(Tensor::from_fn(&[32, 32, 32], |i| ((i % 89) as f64 * 0.02).cos()));
        let p = d2.decode(&mut tape, f, l).unwrap();
        assert_eq!(tape.shape(p), [1, 128, 128]);
        let bad = tape.input(Tensor::zeros(&[32, 16, 16]));
        assert!(d2.decode(&mut tape, f, bad).is_err());
        let before = tape.value(p).clone();
        drop(tape);

        let (pw, _) = d2.projection().unwrap();
        store.get_mut(pw).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&store);
        let f = tape.input(Tensor::from_fn(&[128, 16, 16], |i| ((i % 97) as f64 * 0.01).sin()));
        let l1 = tape.input(Tensor::from_fn(&[32, 32, 32], |i| ((i % 89) as f64 * 0.02).cos()));
        let l2 = tape.input(Tensor::from_fn(&[32, 32, 32], |i| ((i % 13) as f64).sqrt()));
        let p1 = d2.decode(&mut tape, f, l1).unwrap();
        let p2 = d2.decode(&mut tape, f, l2).unwrap();
        assert_eq!(tape.value(p1), tape.value(p2));
        assert_ne!(tape.value(p1), &before);

        let mut store = ParamStore::new();
        let d1 = Decoder::new(&mut store, &mut rng, &DecoderConfig::default(), 128, 16);
        let (hw, hb) = d1.head();
        store.get_mut(hw).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(hb.unwrap()).data_mut()[0] = 0.7;
        let mut tape = Tape::new(&store);
        let f = tape.input(Tensor::from_fn(&[128, 16, 16], |i| (i as f64).sin()));
        let l = tape.input(Tensor::zeros(&[16, 32, 32]));
        let p = d1.decode(&mut tape, f, l).unwrap();
        assert_eq!(tape.shape(p), [1, 128, 128]);
        let expect = 1.0 / (1.0 + (-0.7f64).exp());
        assert!(tape.value(p).data().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn attended_features_are_bounded() {
        let att = AttentionConfig { channel: ChannelAttention::Se, spatial: SpatialAttention::Msa, se_reduction: 4, ..Default::default() };
        let net = CoSegNet::new(small(att, DecoderVariant::D1)).unwrap();
        let mut tape = Tape::new(net.params());
        let fa = tape.input(Tensor::from_fn(&[16, 4, 4], |i| (i as f64 * 0.9).sin()));
        let fb = tape.input(Tensor::from_fn(&[16, 4, 4], |i| (i as f64 * 0.4).cos()));
        let (a, b) = net.attention().apply(&mut tape, fa, fb).unwrap();
        for (src, out) in [(fa, a), (fb, b)] {
            for (x, y) in tape.value(src).data().iter().zip(tape.value(out).data()) {
                assert!(y.abs() <= x.abs());
            }
        }
        let plain = CoSegNet::new(small(AttentionConfig::default(), DecoderVariant::D1)).unwrap();
        let mut tape = Tape::new(plain.params());
        let fa = tape.input(Tensor::full(&[16, 4, 4], 0.3));
        let (a, b) = plain.attention().apply(&mut tape, fa, fa).unwrap();
        assert_eq!((a, b), (fa, fa));
    }

    #[test]
    fn initial_predictions_near_half() {
        let net = CoSegNet::new(small(AttentionConfig::default(), DecoderVariant::D1)).unwrap();
        let (pa, _) = net.forward_pair(&rand_image(32, 1), &rand_image(32, 2)).unwrap();
        assert!(pa.data().iter().all(|p| (p - 0.5).abs() < 0.1));
    }
}
