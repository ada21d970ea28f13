use ndarray::Array2;

use super::gmm::{fit_gmm, GmmModel};
use super::maxflow::{max_flow, FlowNetwork};
use super::trimap::{Trimap, TrimapLabel};
use super::GrabcutParams;
use crate::{Error, Result};

/// Bias added to the cost of flipping a free pixel, so ties keep the previous label.
const STICKY: f64 = 1e-9;

/// Forward half of the 8-neighborhood: `(dy, dx, distance)`.
const NEIGHBORS: [(isize, isize, f64); 4] = [
    (0, 1, 1.0),
    (1, 0, 1.0),
    (1, 1, std::f64::consts::SQRT_2),
    (1, -1, std::f64::consts::SQRT_2),
];

#[derive(Debug, Clone)]
pub struct GrabcutOutcome {
    pub mask: Array2<bool>,
    /// Total energy after each graph cut.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the first cut removed every free pixel from the foreground
    /// and the definite-foreground seed was returned instead.
    pub fell_back: bool,
}

/// Neighbor pair `(p, q, weight)` over the 8-neighborhood, each unordered pair once.
fn pairwise_terms(image: &Array2<f64>, gamma: f64) -> Vec<(usize, usize, f64)> {
    let (h, w) = image.dim();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut pairs = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for &(dy, dx, dist) in &NEIGHBORS {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                let d = image[[y, x]] - image[[ny, nx]];
                sum += d * d;
                count += 1;
                pairs.push((y * w + x, ny * w + nx, d * d, dist));
            }
        }
    }
    // beta = 1 / (2 <(z_m - z_n)^2>), zero on a constant image.
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    let beta = if mean > 0.0 { 1.0 / (2.0 * mean) } else { 0.0 };
    pairs
        .into_iter()
        .map(|(p, q, d2, dist)| (p, q, gamma * (-beta * d2).exp() / dist))
        .collect()
}

/// `sum unary(label) + sum_{p~q, label differs} w_pq`.
pub fn grabcut_energy(
    labels: &[bool],
    unary_fg: &[f64],
    unary_bg: &[f64],
    pairs: &[(usize, usize, f64)],
) -> f64 {
    let data: f64 = labels
        .iter()
        .zip(unary_fg.iter().zip(unary_bg))
        .map(|(&fg, (&uf, &ub))| if fg { uf } else { ub })
        .sum();
    let smooth: f64 = pairs
        .iter()
        .filter(|(p, q, _)| labels[*p] != labels[*q])
        .map(|t| t.2)
        .sum();
    data + smooth
}

fn class_samples(z: &[f64], labels: &[bool], fg: bool) -> Vec<f64> {
    z.iter().zip(labels).filter(|(_, &l)| l == fg).map(|(&v, _)| v).collect()
}

/// Iterated GrabCut on a single-channel image in `[0, 1]`.
///
/// Each iteration refits the foreground and background mixtures to the
/// current labeling (warm-started EM after the first pass, so the data term
/// cannot increase) and then solves the binary labeling exactly with a graph
/// cut. Definite seeds never change. Stops after `max_iters` or once fewer
/// than `convergence_tol` of the pixels flip.
pub fn grabcut_iterate(image: &Array2<f64>, trimap: &Trimap, params: &GrabcutParams) -> Result<GrabcutOutcome> {
    params.validate()?;
    if image.dim() != trimap.labels.dim() {
        return Err(Error::Shape(format!(
            "image {:?} vs trimap {:?}",
            image.dim(),
            trimap.labels.dim()
        )));
    }
    let (h, w) = image.dim();
    let n = h * w;
    let seeds: Vec<TrimapLabel> = trimap.labels.iter().copied().collect();
    let z: Vec<f64> = image.iter().copied().collect();
    if !seeds.contains(&TrimapLabel::DefFg) || !seeds.contains(&TrimapLabel::DefBg) {
        return Err(Error::Invalid("trimap needs definite foreground and background".into()));
    }
    let free = seeds.iter().filter(|l| !l.is_fixed()).count();
    if free == 0 {
        return Ok(GrabcutOutcome {
            mask: trimap.def_fg_mask(),
            energies: Vec::new(),
            iterations: 0,
            converged: true,
            fell_back: false,
        });
    }

    let pairs = pairwise_terms(image, params.gamma);
    // Larger than any cut through a single pixel's n-links.
    let mut nlink_sum = vec![0.0; n];
    for &(p, q, wt) in &pairs {
        nlink_sum[p] += wt;
        nlink_sum[q] += wt;
    }
    let hard = 1.0 + nlink_sum.iter().copied().fold(0.0, f64::max);

    let mut labels: Vec<bool> = seeds.iter().map(|l| l.is_fg()).collect();
    let mut models: Option<(GmmModel, GmmModel)> = None;
    let mut energies = Vec::new();
    let mut unary_fg = vec![0.0; n];
    let mut unary_bg = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..params.max_iters {
        iterations = iter + 1;
        let fg_samples = class_samples(&z, &labels, true);
        let bg_samples = class_samples(&z, &labels, false);
        let (fg, bg) = match models.take() {
            None => (
                fit_gmm(&fg_samples, params.gmm_components, params.rng_seed, params.variance_floor)?,
                fit_gmm(&bg_samples, params.gmm_components, params.rng_seed.wrapping_add(1), params.variance_floor)?,
            ),
            Some((mut fg, mut bg)) => {
                fg.em(&fg_samples, params.em_iters, 1e-10);
                bg.em(&bg_samples, params.em_iters, 1e-10);
                (fg, bg)
            }
        };
        for i in 0..n {
            unary_fg[i] = -fg.log_likelihood(z[i]);
            unary_bg[i] = -bg.log_likelihood(z[i]);
        }

        let mut net = FlowNetwork::with_capacity(n, 6);
        for i in 0..n {
            match seeds[i] {
                TrimapLabel::DefFg => net.add_terminal(i, hard, 0.0),
                TrimapLabel::DefBg => net.add_terminal(i, 0.0, hard),
                _ => {
                    // Source side = foreground; the source arc is cut (paid) when
                    // the pixel ends up background.
                    let mut cost_bg = unary_bg[i];
                    let mut cost_fg = unary_fg[i];
                    if labels[i] {
                        cost_bg += STICKY;
                    } else {
                        cost_fg += STICKY;
                    }
                    let m = cost_bg.min(cost_fg);
                    net.add_terminal(i, cost_bg - m, cost_fg - m);
                }
            }
        }
        for &(p, q, wt) in &pairs {
            net.add_edge_pair(p, q, wt, wt);
        }
        let cut = max_flow(&net);
        let mut next = cut.source_side;
        for (l, s) in next.iter_mut().zip(&seeds) {
            match s {
                TrimapLabel::DefFg => *l = true,
                TrimapLabel::DefBg => *l = false,
                _ => {}
            }
        }

        if iter == 0 && !next.iter().zip(&seeds).any(|(&l, s)| l && !s.is_fixed()) {
            log::warn!("GrabCut assigned every free pixel to background; returning the seed mask");
            return Ok(GrabcutOutcome {
                mask: trimap.def_fg_mask(),
                energies: vec![grabcut_energy(&next, &unary_fg, &unary_bg, &pairs)],
                iterations,
                converged: false,
                fell_back: true,
            });
        }

        let changed = next.iter().zip(&labels).filter(|(a, b)| a != b).count();
        labels = next;
        energies.push(grabcut_energy(&labels, &unary_fg, &unary_bg, &pairs));
        models = Some((fg, bg));
        if (changed as f64) < params.convergence_tol * n as f64 {
            converged = true;
            break;
        }
    }

    Ok(GrabcutOutcome {
        mask: Array2::from_shape_vec((h, w), labels).expect("shape"),
        energies,
        iterations,
        converged,
        fell_back: false,
    })
}
