use rand::Rng;

use super::layers::{ConvLayer, Init};
use super::EncoderConfig;
use crate::nn::{ConvSpec, ParamId, ParamStore, Tape, Var};
use crate::Result;

#[derive(Debug, Clone)]
pub(crate) struct ResUnit {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub shortcut: Option<ConvLayer>,
}

impl ResUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let first = if stride > 1 { ConvSpec::strided(3, stride) } else { ConvSpec::same(3, dilation) };
        let conv1 = ConvLayer::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, first, true, Init::He(1.0));
        let conv2 = ConvLayer::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            ConvSpec::same(3, dilation),
            true,
            Init::He(0.5),
        );
        let shortcut = (stride > 1 || cin != cout).then(|| {
            ConvLayer::new(
                store,
                rng,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                ConvSpec { stride, dilation: 1, padding: 0 },
                false,
                Init::He(1.0),
            )
        });
        Self { conv1, conv2, shortcut }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv1.apply(tape, x)?;
        let y = tape.relu(y);
        let y = self.conv2.apply(tape, y)?;
        let s = match &self.shortcut {
            Some(sc) => sc.apply(tape, x)?,
            None => x,
        };
        let sum = tape.add(y, s)?;
        Ok(tape.relu(sum))
    }
}

/// Residual encoder with output stride 8: a strided stem, two strided stages
/// and two dilation-only stages.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: ConvLayer,
    pub(crate) stages: Vec<Vec<ResUnit>>,
}

impl Encoder {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Self {
        let ch = &cfg.stage_channels;
        let stem = ConvLayer::new(store, rng, "encoder.stem", 1, ch[0], 3, ConvSpec::strided(3, 2), true, Init::He(1.0));
        let mut stages = Vec::new();
        let mut cin = ch[0];
        let final_rates = cfg.final_stage_rates();
        for (s, &cout) in ch.iter().enumerate() {
            let rates: Vec<(usize, usize)> = match s {
                0 | 1 => (0..cfg.units_per_stage).map(|u| (if u == 0 { 2 } else { 1 }, 1)).collect(),
                2 => vec![(1, cfg.dilations.0); cfg.units_per_stage],
                _ => final_rates.iter().map(|&r| (1, r)).collect(),
            };
            let mut units = Vec::new();
            for (u, (stride, dilation)) in rates.into_iter().enumerate() {
                units.push(ResUnit::new(store, rng, &format!("encoder.stage{s}.unit{u}"), cin, cout, stride, dilation));
                cin = cout;
            }
            stages.push(units);
        }
        Self { stem, stages }
    }

    /// Returns `(bottleneck at stride 8, low-level features at stride 4)`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let y = self.stem.apply(tape, x)?;
        let mut y = tape.relu(y);
        let mut low = y;
        for (s, units) in self.stages.iter().enumerate() {
            for unit in units {
                y = unit.apply(tape, y)?;
            }
            if s == 0 {
                low = y;
            }
        }
        Ok((y, low))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.stem.params();
        for unit in self.stages.iter().flatten() {
            out.extend(unit.conv1.params());
            out.extend(unit.conv2.params());
            if let Some(sc) = &unit.shortcut {
                out.extend(sc.params());
            }
        }
        out
    }

    /// Dilation of the first convolution of each final-stage unit.
    pub fn final_stage_dilations(&self) -> Vec<usize> {
        self.stages[3].iter().map(|u| u.conv1.spec.dilation).collect()
    }
}
