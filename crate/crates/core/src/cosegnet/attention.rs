use rand::Rng;

use super::layers::{add_weight, ConvLayer, Init};
use super::{AttentionConfig, ChannelAttention, SpatialAttention};
use crate::nn::{ConvSpec, ParamId, ParamStore, Tape, Var};
use crate::Result;

#[derive(Debug, Clone)]
pub(crate) struct Se {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Aspp {
    pub branches: Vec<ConvLayer>,
    pub fuse: ConvLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct Danet {
    pub query: ConvLayer,
    pub key: ConvLayer,
    pub value: ConvLayer,
    pub gamma_p: ParamId,
    pub gamma_c: ParamId,
}

/// Channel gating, spatial weighting or dual attention on the bottleneck pair.
#[derive(Debug, Clone)]
pub struct Attention {
    pub(crate) se: Option<Se>,
    pub(crate) eca: Option<ParamId>,
    pub(crate) msa: bool,
    pub(crate) aspp: Option<Aspp>,
    pub(crate) danet: Option<Danet>,
}

impl Attention {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &AttentionConfig, c: usize) -> Self {
        let se = (cfg.channel == ChannelAttention::Se).then(|| {
            let hidden = c / cfg.se_reduction;
            Se {
                w1: add_weight(store, "attention.se.w1", &[hidden, c], c, Init::He(1.0), rng),
                w2: add_weight(store, "attention.se.w2", &[c, hidden], hidden, Init::He(0.5), rng),
            }
        });
        let eca = (cfg.channel == ChannelAttention::Eca).then(|| {
            let k = cfg.eca_kernel(c);
            add_weight(store, "attention.eca.kernel", &[k], k, Init::He(0.5), rng)
        });
        let aspp = (cfg.spatial == SpatialAttention::Aspp).then(|| {
            let width = (c / 4).max(1);
            let branches = cfg
                .aspp_rates
                .iter()
                .map(|&r| {
                    ConvLayer::new(
                        store,
                        rng,
                        &format!("attention.aspp.rate{r}"),
                        c,
                        width,
                        3,
                        ConvSpec::same(3, r),
                        false,
                        Init::He(1.0),
                    )
                })
                .collect::<Vec<_>>();
            let n = width * branches.len();
            let fuse = ConvLayer::new(store, rng, "attention.aspp.fuse", n, 1, 1, ConvSpec::same(1, 1), false, Init::He(0.5));
            Aspp { branches, fuse }
        });
        let danet = cfg.danet.then(|| {
            let cq = (c / 8).max(1);
            let pw = ConvSpec::same(1, 1);
            Danet {
                query: ConvLayer::new(store, rng, "attention.danet.query", c, cq, 1, pw, true, Init::He(0.5)),
                key: ConvLayer::new(store, rng, "attention.danet.key", c, cq, 1, pw, true, Init::He(0.5)),
                value: ConvLayer::new(store, rng, "attention.danet.value", c, c, 1, pw, true, Init::He(0.5)),
                gamma_p: store.add_zeros("attention.danet.gamma_p", &[1]),
                gamma_c: store.add_zeros("attention.danet.gamma_c", &[1]),
            }
        });
        Self { se, eca, msa: cfg.spatial == SpatialAttention::Msa, aspp, danet }
    }

    /// Shared channel gate from the summed pooled descriptors of both maps.
    pub fn channel_gate(&self, tape: &mut Tape, fa: Var, fb: Var) -> Result<Option<Var>> {
        if self.se.is_none() && self.eca.is_none() {
            return Ok(None);
        }
        let za = tape.gap(fa)?;
        let zb = tape.gap(fb)?;
        let z = tape.add(za, zb)?;
        let logits = if let Some(se) = &self.se {
            let w1 = tape.param(se.w1);
            let h = tape.linear(w1, z)?;
            let h = tape.relu(h);
            let w2 = tape.param(se.w2);
            tape.linear(w2, h)?
        } else {
            let k = tape.param(self.eca.expect("checked above"));
            tape.conv1d_same(z, k)?
        };
        Ok(Some(tape.sigmoid(logits)))
    }

    /// Spatial weighting map `(1, H, W)` computed from one image's features.
    pub fn spatial_map(&self, tape: &mut Tape, f: Var) -> Result<Option<Var>> {
        if self.msa {
            let m = tape.channel_mean(f)?;
            return Ok(Some(tape.minmax_norm(m)));
        }
        let Some(aspp) = &self.aspp else { return Ok(None) };
        let mut cat: Option<Var> = None;
        for branch in &aspp.branches {
            let y = branch.apply(tape, f)?;
            let y = tape.relu(y);
            cat = Some(match cat {
                Some(c) => tape.concat(c, y)?,
                None => y,
            });
        }
        let fused = aspp.fuse.apply(tape, cat.expect("at least one rate"))?;
        Ok(Some(tape.sigmoid(fused)))
    }

    /// Dual attention for `f_self` with affinities from the fused pair `g`.
    pub fn danet_one(&self, tape: &mut Tape, f_self: Var, g: Var) -> Result<Var> {
        let d = self.danet.as_ref().expect("danet configured");
        let (c, h, w) = tape.value(f_self).dims3()?;
        let n = h * w;
        let q = d.query.apply(tape, g)?;
        let cq = tape.value(q).dims3()?.0;
        let q = tape.reshape(q, vec![cq, n])?;
        let k = d.key.apply(tape, g)?;
        let k = tape.reshape(k, vec![cq, n])?;
        let v = d.value.apply(tape, f_self)?;
        let v = tape.reshape(v, vec![c, n])?;
        let qt = tape.transpose(q)?;
        let energy = tape.matmul(qt, k)?;
        let aff = tape.softmax_rows(energy)?;
        let aff_t = tape.transpose(aff)?;
        let pos = tape.matmul(v, aff_t)?;
        let pos = tape.reshape(pos, vec![c, h, w])?;
        let gp = tape.param(d.gamma_p);
        let pos = tape.scale_scalar(pos, gp)?;
        let pos = tape.add(pos, f_self)?;

        let xg = tape.reshape(g, vec![c, n])?;
        let xs = tape.reshape(f_self, vec![c, n])?;
        let xgt = tape.transpose(xg)?;
        let energy = tape.matmul(xg, xgt)?;
        let aff = tape.softmax_rows(energy)?;
        let ch = tape.matmul(aff, xs)?;
        let ch = tape.reshape(ch, vec![c, h, w])?;
        let gc = tape.param(d.gamma_c);
        let ch = tape.scale_scalar(ch, gc)?;
        let ch = tape.add(ch, f_self)?;
        tape.add(pos, ch)
    }

    pub fn apply(&self, tape: &mut Tape, fa: Var, fb: Var) -> Result<(Var, Var)> {
        if self.danet.is_some() {
            let g = tape.add(fa, fb)?;
            let a = self.danet_one(tape, fa, g)?;
            let b = self.danet_one(tape, fb, g)?;
            return Ok((a, b));
        }
        let (mut a, mut b) = (fa, fb);
        if let Some(gate) = self.channel_gate(tape, fa, fb)? {
            a = tape.scale_channels(a, gate)?;
            b = tape.scale_channels(b, gate)?;
        }
        if let Some(sa) = self.spatial_map(tape, fa)? {
            a = tape.scale_spatial(a, sa)?;
        }
        if let Some(sb) = self.spatial_map(tape, fb)? {
            b = tape.scale_spatial(b, sb)?;
        }
        Ok((a, b))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(se) = &self.se {
            out.extend([se.w1, se.w2]);
        }
        out.extend(self.eca);
        if let Some(a) = &self.aspp {
            for b in &a.branches {
                out.extend(b.params());
            }
            out.extend(a.fuse.params());
        }
        if let Some(d) = &self.danet {
            for l in [&d.query, &d.key, &d.value] {
                out.extend(l.params());
            }
            out.extend([d.gamma_p, d.gamma_c]);
        }
        out
    }
}
