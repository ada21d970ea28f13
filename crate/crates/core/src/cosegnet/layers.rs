use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{ConvSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

/// Initial weight scale.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// He-normal scaled by a gain.
    He(f64),
    /// Normal with a fixed standard deviation.
    Std(f64),
}

pub(crate) fn add_weight<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    match init {
        Init::He(gain) => store.add_he(name, shape, fan_in, gain, rng),
        Init::Std(std) => {
            let normal = Normal::new(0.0, std).expect("finite std");
            store.add(name, Tensor::from_fn(shape, |_| normal.sample(rng)))
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = add_weight(store, &format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, init, rng);
        let b = bias.then(|| store.add_zeros(&format!("{name}.bias"), &[cout]));
        Self { w, b, spec }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}
