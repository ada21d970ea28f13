use rand::Rng;

use super::layers::{ConvLayer, Init};
use super::{DecoderConfig, DecoderVariant};
use crate::nn::{ConvSpec, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

const HEAD_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Decoder {
    pub(crate) variant: DecoderVariant,
    pub(crate) convs: Vec<ConvLayer>,
    pub(crate) projection: Option<ConvLayer>,
    pub(crate) head: ConvLayer,
}

impl Decoder {
    pub(crate) fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &DecoderConfig,
        channels: usize,
        low_channels: usize,
    ) -> Self {
        let c3 = ConvSpec::same(3, 1);
        let pw = ConvSpec::same(1, 1);
        match cfg.variant {
            DecoderVariant::D1 => {
                let widths = [channels, (channels / 2).max(8), (channels / 4).max(8), (channels / 8).max(8)];
                let convs = (0..3)
                    .map(|i| {
                        ConvLayer::new(store, rng, &format!("decoder.block{i}"), widths[i], widths[i + 1], 3, c3, true, Init::He(1.0))
                    })
                    .collect();
                let head = ConvLayer::new(store, rng, "decoder.head", widths[3], 1, 1, pw, true, Init::Std(HEAD_STD));
                Self { variant: cfg.variant, convs, projection: None, head }
            }
            DecoderVariant::D2 => {
                let dl = cfg.d2_lowlevel_channels;
                let width = (channels / 2).max(8);
                let projection = ConvLayer::new(store, rng, "decoder.lowlevel", low_channels, dl, 1, pw, true, Init::He(1.0));
                let convs = vec![
                    ConvLayer::new(store, rng, "decoder.fuse0", channels + dl, width, 3, c3, true, Init::He(1.0)),
                    ConvLayer::new(store, rng, "decoder.fuse1", width, width, 3, c3, true, Init::He(1.0)),
                ];
                let head = ConvLayer::new(store, rng, "decoder.head", width, 1, 1, pw, true, Init::Std(HEAD_STD));
                Self { variant: cfg.variant, convs, projection: Some(projection), head }
            }
        }
    }

    /// Probability map `(1, H, W)` from bottleneck features and the stride-4 tap.
    pub fn decode(&self, tape: &mut Tape, f: Var, low: Var) -> Result<Var> {
        // The 1x1 head commutes with bilinear upsampling, so it runs first.
        match self.variant {
            DecoderVariant::D1 => {
                let mut y = f;
                for (i, conv) in self.convs.iter().enumerate() {
                    y = conv.apply(tape, y)?;
                    y = tape.relu(y);
                    if i < 2 {
                        y = tape.upsample(y, 2)?;
                    }
                }
                let y = self.head.apply(tape, y)?;
                let y = tape.upsample(y, 2)?;
                Ok(tape.sigmoid(y))
            }
            DecoderVariant::D2 => {
                let (_, fh, fw) = tape.value(f).dims3()?;
                let (_, lh, lw) = tape.value(low).dims3()?;
                if (lh, lw) != (2 * fh, 2 * fw) {
                    return Err(Error::Shape(format!(
                        "low-level features {lh}x{lw} are not at twice the bottleneck resolution {fh}x{fw}"
                    )));
                }
                let up = tape.upsample(f, 2)?;
                let proj = self.projection.as_ref().expect("d2 projection").apply(tape, low)?;
                let proj = tape.relu(proj);
                let mut y = tape.concat(up, proj)?;
                for conv in &self.convs {
                    y = conv.apply(tape, y)?;
                    y = tape.relu(y);
                }
                let y = self.head.apply(tape, y)?;
                let y = tape.upsample(y, 4)?;
                Ok(tape.sigmoid(y))
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.projection.iter().flat_map(ConvLayer::params).collect();
        for c in &self.convs {
            out.extend(c.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn head(&self) -> (ParamId, Option<ParamId>) {
        (self.head.w, self.head.b)
    }

    pub fn projection(&self) -> Option<(ParamId, Option<ParamId>)> {
        self.projection.as_ref().map(|p| (p.w, p.b))
    }
}
